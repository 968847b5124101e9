"""On-disk containers: the MVOL volume/field format, series manifests,
configuration files, and optimizer checkpoints.

An MVOL file is a raw little-endian float32 payload with a JSON sidecar
(`<file>.json`) describing the grid. Scalar volumes store one value per voxel,
vector fields three interleaved values; voxels are laid out C-style with the z
index varying fastest. Write-then-read is bitwise lossless.
"""

import json
from pathlib import Path

import numpy as np

from .grid import GridSpec, ImageSeries, Mask, VectorField, Volume

MAGIC = "MVOL1"
FORMAT_VERSION = "1"


class MVolError(ValueError):
    """Malformed MVOL file or sidecar."""


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_mvol(path, grid: GridSpec, data: np.ndarray, units: str = "intensity",
              time_index: int | None = None, provenance: dict | None = None):
    """Write a scalar (nx,ny,nz) or vector (nx,ny,nz,3) array plus its JSON sidecar."""
    path = Path(path)
    channels = 1 if data.ndim == 3 else data.shape[-1]
    if data.shape[:3] != grid.dims or channels not in (1, 3):
        raise MVolError(f"data shape {data.shape} does not fit grid dims {grid.dims}")
    header = {
        "magic": MAGIC,
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "origin_mm": list(grid.origin),
        "channels": channels,
        "dtype": "f32le",
        "layout": "z-fastest",
        "units": units,
    }
    if time_index is not None:
        header["time_index"] = int(time_index)
    if provenance is not None:
        header["provenance"] = provenance
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    path.write_bytes(payload)
    _sidecar(path).write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")


def load_mvol(path):
    """Read an MVOL file; returns (grid, data, header)."""
    path = Path(path)
    side = _sidecar(path)
    if not path.exists():
        raise MVolError(f"missing MVOL payload: {path}")
    if not side.exists():
        raise MVolError(f"missing MVOL sidecar: {side}")
    try:
        header = json.loads(side.read_text())
    except json.JSONDecodeError as err:
        raise MVolError(f"invalid JSON in sidecar {side}: {err}") from err
    for field in ("magic", "dims", "spacing_mm", "origin_mm", "channels", "dtype", "layout"):
        if field not in header:
            raise MVolError(f"sidecar {side} missing field '{field}'")
    if header["magic"] != MAGIC:
        raise MVolError(f"{side}: bad magic {header['magic']!r}")
    if header["dtype"] != "f32le" or header["layout"] != "z-fastest":
        raise MVolError(f"{side}: unsupported dtype/layout")
    grid = GridSpec(tuple(header["dims"]), tuple(header["spacing_mm"]), tuple(header["origin_mm"]))
    channels = int(header["channels"])
    if channels not in (1, 3):
        raise MVolError(f"{side}: channels must be 1 or 3")
    payload = path.read_bytes()
    expected = 4 * channels * grid.n_voxels
    if len(payload) != expected:
        raise MVolError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    shape = grid.dims if channels == 1 else grid.dims + (3,)
    return grid, data.reshape(shape), header


def save_volume(path, vol: Volume, **kw):
    save_mvol(path, vol.grid, vol.data, units=kw.pop("units", "intensity"), **kw)


def load_volume(path) -> Volume:
    grid, data, header = load_mvol(path)
    if data.ndim != 3:
        raise MVolError(f"{path}: expected a scalar volume, got {header['channels']} channels")
    return Volume(grid, data)


def save_field(path, field: VectorField, **kw):
    save_mvol(path, field.grid, field.data, units=kw.pop("units", "voxels"), **kw)


def load_field(path) -> VectorField:
    grid, data, header = load_mvol(path)
    if data.ndim != 4:
        raise MVolError(f"{path}: expected a 3-channel field, got {header['channels']} channel(s)")
    return VectorField(grid, data)


def save_mask(path, mask: Mask):
    save_mvol(path, mask.grid, mask.data.astype(np.float64), units="mask")


def load_mask(path) -> Mask:
    grid, data, _ = load_mvol(path)
    if data.ndim != 3:
        raise MVolError(f"{path}: expected a scalar mask volume")
    return Mask(grid, data > 0.5)


# ---------------------------------------------------------------------------
# Series manifests and configs
# ---------------------------------------------------------------------------

def load_series(manifest_path) -> ImageSeries:
    """Read a series manifest: {"images": [paths...], "times": [...]} (times optional)."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as err:
        raise MVolError(f"missing series manifest: {manifest_path}") from err
    except json.JSONDecodeError as err:
        raise MVolError(f"invalid JSON in series manifest {manifest_path}: {err}") from err
    if "images" not in manifest or not manifest["images"]:
        raise MVolError(f"series manifest {manifest_path} has no 'images' list")
    base = manifest_path.parent
    volumes = []
    for rel in manifest["images"]:
        p = Path(rel)
        volumes.append(load_volume(p if p.is_absolute() else base / p))
    times = manifest.get("times")
    if times is None:
        times = [float(k) for k in range(len(volumes))]
    return ImageSeries(volumes, times)


def save_series_manifest(path, image_paths: list[str], times: list[float]):
    Path(path).write_text(json.dumps({"images": image_paths, "times": times}, indent=1) + "\n")


def load_config(path):
    from .config import RegistrationConfig

    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as err:
        raise MVolError(f"missing config file: {path}") from err
    except json.JSONDecodeError as err:
        raise MVolError(f"invalid JSON in config {path}: {err}") from err
    try:
        return RegistrationConfig.from_dict(raw)
    except (TypeError, ValueError) as err:
        raise MVolError(f"bad config {path}: {err}") from err


def save_config(path, cfg):
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, flows: list[VectorField], rigid: np.ndarray, optim_state=None, meta: dict | None = None):
    """Persist flows, rigid rows and (optionally) Adam moments for resuming."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for g, f in enumerate(flows):
        save_field(directory / f"flow_{g:02d}.mvol", f)
    state = {"rigid": np.asarray(rigid).tolist(), "n_gaps": len(flows), "meta": meta or {}}
    if optim_state is not None:
        state["adam"] = {
            "step": optim_state.step,
            "beta1": optim_state.beta1,
            "beta2": optim_state.beta2,
            "eps": optim_state.eps,
        }
        for k, (m, v) in enumerate(zip(optim_state.m, optim_state.v)):
            np.save(directory / f"adam_m_{k:02d}.npy", m)
            np.save(directory / f"adam_v_{k:02d}.npy", v)
    (directory / "checkpoint.json").write_text(json.dumps(state, sort_keys=True, indent=1) + "\n")


def load_checkpoint(directory):
    """Load a checkpoint directory; returns (flows, rigid, state_dict)."""
    directory = Path(directory)
    state_path = directory / "checkpoint.json"
    if not state_path.exists():
        raise MVolError(f"missing checkpoint state: {state_path}")
    state = json.loads(state_path.read_text())
    flows = [load_field(directory / f"flow_{g:02d}.mvol") for g in range(state["n_gaps"])]
    rigid = np.asarray(state["rigid"], dtype=np.float64)
    if "adam" in state:
        ms = sorted(directory.glob("adam_m_*.npy"))
        vs = sorted(directory.glob("adam_v_*.npy"))
        state["adam"]["m"] = [np.load(p) for p in ms]
        state["adam"]["v"] = [np.load(p) for p in vs]
    return flows, rigid, state


def write_jsonl(path, rows: list[dict]):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_csv(path, rows: list[dict]):
    import csv

    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
