"""Registration configuration: stage schedule, loss weights, optimizer settings."""

from dataclasses import dataclass, field, asdict


@dataclass
class StageSpec:
    """One multi-resolution stage.

    image_downsample and flow_resolution are both relative to the full image
    grid, so the flow parameters live on a grid flow_resolution/image_downsample
    times coarser than the stage images.
    """

    image_downsample: int
    flow_resolution: int
    n_iters: int
    base_lr: float


@dataclass
class RegistrationConfig:
    stages: list[StageSpec] = field(
        default_factory=lambda: [
            StageSpec(4, 8, 200, 0.1),
            StageSpec(2, 4, 200, 0.05),
            StageSpec(1, 2, 100, 0.02),
        ]
    )
    alpha_ss: float = 1.0
    alpha_l2: float = 0.01
    alpha_ts: float = 1.0
    window_radius: int = 1
    eps_scale: float = 1e-5
    flow_smooth_sigma_vox: float = 1.0
    rigid_lr: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    exp_n_iter: int | None = None  # None: adaptive from the flow magnitude
    times: list[float] | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ValueError("config needs at least one stage")
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        for w in (self.alpha_ss, self.alpha_l2, self.alpha_ts):
            if w < 0:
                raise ValueError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)
