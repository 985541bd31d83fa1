"""
Run configuration: dataclasses with the engine defaults, loaded from a TOML document.
"""
import dataclasses
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field

from splatvox_pkg.errors import ConfigError
from splatvox_pkg.eval_metrics import MeshEvalConfig
from splatvox_pkg.gaussian_field import KeyframePolicy, OptimConfig
from splatvox_pkg.instance_fusion import FusionConfig
from splatvox_pkg.synthetic import WORLD_BUILDERS, NoiseConfig

@dataclass
class GridConfig:
    """
    Parameters:
        resolution (float): Voxel size in meters.
        truncation (float, optional): TSDF truncation in meters; 4 x resolution when unset.
        erosion_radius (int): Mask erosion radius in pixels.
    """
    resolution: float = 0.03
    truncation: float = None
    erosion_radius: int = 1

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}.")
        if self.truncation is not None and self.truncation < 2 * self.resolution:
            raise ValueError(f"truncation {self.truncation} must be at least twice the resolution.")
        if not isinstance(self.erosion_radius, int) or self.erosion_radius < 0:
            raise ValueError(f"erosion_radius must be a non-negative integer, got {self.erosion_radius}.")

@dataclass
class SyntheticConfig:
    """Scene and camera orbit of the synthetic source."""
    scene: str = "two_objects"
    n_frames: int = 10
    width: int = 64
    height: int = 48
    fov_deg: float = 60.0
    orbit_radius: float = 1.6
    camera_height: float = 1.0
    arc_deg: float = 90.0
    start_deg: float = -90.0
    loops: int = 1

    def __post_init__(self):
        if self.scene not in WORLD_BUILDERS:
            raise ValueError(f"Unknown scene '{self.scene}'. Expected one of {sorted(WORLD_BUILDERS)}.")
        for name in ("n_frames", "width", "height", "loops"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < (0 if name == "n_frames" else 1):
                raise ValueError(f"{name} must be a positive integer, got {value}.")
        if not 0 < self.fov_deg < 180:
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}.")

SECTIONS = {
    "grid": GridConfig,
    "fusion": FusionConfig,
    "keyframe": KeyframePolicy,
    "optim": OptimConfig,
    "noise": NoiseConfig,
    "synthetic": SyntheticConfig,
    "eval": MeshEvalConfig,
}

@dataclass
class PipelineConfig:
    """
    Everything a build needs.

    Parameters:
        embedding_dim (int): Embedding length of synthetic scenes.
        seed (int): Seed of synthetic worlds and of keyframe sampling.
        out_dir (str): Default output directory.
        optimize (bool): False skips Gaussian optimization (mapping only).
    """
    grid: GridConfig = field(default_factory=GridConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    optim: OptimConfig = field(default_factory=OptimConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    eval: MeshEvalConfig = field(default_factory=MeshEvalConfig)
    embedding_dim: int = 64
    seed: int = 0
    out_dir: str = "splatvox_out"
    optimize: bool = True

    def __post_init__(self):
        if not isinstance(self.embedding_dim, int) or self.embedding_dim <= 0:
            raise ConfigError(f"embedding_dim must be a positive integer, got {self.embedding_dim}.")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}.")

def config_from_dict(data):
    """
    Build a PipelineConfig from nested dictionaries, as read from TOML.

    Raises:
        ConfigError: On unknown sections or keys, or values violating a section's invariants.
    """
    top_level = {f.name for f in dataclasses.fields(PipelineConfig)} - set(SECTIONS)
    kwargs = {}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table.")
            cls = SECTIONS[key]
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = sorted(set(value) - known)
            if unknown:
                raise ConfigError(f"Unknown key(s) in [{key}]: {', '.join(unknown)}.")
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[{key}] {e}") from e
        elif key in top_level:
            kwargs[key] = value
        else:
            raise ConfigError(f"Unknown configuration key '{key}'.")
    return PipelineConfig(**kwargs)

# Used by the CLI to read --config
def load_config(path=None):
    """
    Load a TOML configuration file. Missing sections and keys keep their defaults.

    Raises:
        ConfigError: If the file cannot be read or parsed, or holds invalid settings.
    """
    if path is None:
        return PipelineConfig()
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    return config_from_dict(data)

def config_to_dict(config):
    """Nested plain-dict view of a configuration (for config.json)."""
    return dataclasses.asdict(config)

def with_overrides(config, seed=None, out_dir=None, n_frames=None):
    """Copy of a configuration with command-line overrides applied."""
    changes = {}
    if seed is not None:
        changes["seed"] = int(seed)
    if out_dir is not None:
        changes["out_dir"] = str(out_dir)
    if n_frames is not None:
        try:
            changes["synthetic"] = dataclasses.replace(config.synthetic, n_frames=int(n_frames))
        except ValueError as e:
            raise ConfigError(f"--frames: {e}") from e
    return dataclasses.replace(config, **changes)
