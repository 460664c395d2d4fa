"""Virtual H&E staining of label-free BIT volumes with multiscale consistency and style fusion."""
from .config import TrainConfig, load_config
from .metrics import MetricsReport, evaluate_pair
from .networks import Generator, GeneratorConfig, PatchDiscriminator
from .phantom import PhantomSpec, generate_phantom
from .style import FusionSchedule, StylePrototype, adain_fuse
from .trainer import Stainer, stain_volume, train

__all__ = [
    "FusionSchedule", "Generator", "GeneratorConfig", "MetricsReport", "PatchDiscriminator",
    "PhantomSpec", "Stainer", "StylePrototype", "TrainConfig", "adain_fuse", "evaluate_pair",
    "generate_phantom", "load_config", "stain_volume", "train",
]
