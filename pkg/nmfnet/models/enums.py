import enum


class BlockKind(str, enum.Enum):
    CNN = "cnn"
    CNMF = "cnmf"


class GradMode(str, enum.Enum):
    # U receives the weight error as is
    DIRECT = "direct"
    # exact chain rule through |U| normalization and input normalization
    CHAIN = "chain"


class BackwardEngine(str, enum.Enum):
    APPROX = "approx"
    UNROLLED = "unrolled"


class Preset(str, enum.Enum):
    CNN = "cnn"
    CNMF = "cnmf"
    CNN_MIX = "cnn_mix"
    CNMF_MIX = "cnmf_mix"


class BenchArm(str, enum.Enum):
    CNN = "cnn"
    NMF_UNROLLED = "nmf_unrolled"
    NMF_APPROX = "nmf_approx"
