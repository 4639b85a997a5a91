# Models package - network building blocks and the enums they are configured with
from .enums import BackwardEngine, BenchArm, BlockKind, GradMode, Preset
