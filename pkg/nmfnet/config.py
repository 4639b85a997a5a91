import os
from dotenv import load_dotenv

load_dotenv()


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Settings:
    # Numerics
    DTYPE: str = os.getenv("NMFNET_DTYPE", "float64")
    DATASET_DTYPE: str = os.getenv("NMFNET_DATASET_DTYPE", "float32")
    EPS_DIV: float = float(os.getenv("NMFNET_EPS_DIV", "1e-20"))

    # NMF layer defaults
    NMF_ITERS: int = int(os.getenv("NMFNET_NMF_ITERS", "75"))
    NMF_EPSILON: float = float(os.getenv("NMFNET_NMF_EPSILON", "1.0"))

    # Upper bound on batch * S * I * N for the exact unrolled backward
    UNROLL_BUDGET: int = int(os.getenv("NMFNET_UNROLL_BUDGET", "50000000"))

    # Asserts the non-negative input contract at every NMF layer
    DEBUG_CHECKS: bool = _flag("NMFNET_DEBUG_CHECKS", "true")

    # Batch-axis thread pool size (1 = sequential)
    WORKERS: int = int(os.getenv("NMFNET_WORKERS", "1"))

    # Paths
    DATA_DIR: str = os.getenv("NMFNET_DATA_DIR", "data/cifar-10-batches-bin")
    OUTPUT_DIR: str = os.getenv("NMFNET_OUTPUT_DIR", "runs")

    # Logging
    LOG_LEVEL: str = os.getenv("NMFNET_LOG_LEVEL", "INFO")
    LOG_JSON: bool = _flag("NMFNET_LOG_JSON", "false")

    # API
    API_TITLE: str = os.getenv("NMFNET_API_TITLE", "nmfnet API")


settings = Settings()
