"""Knowledge tracing with learned sparse binary auxiliary KCs."""

from importlib import resources

__version__ = "0.1.0"


def toy_dataset_path():
    """Path to the bundled toy interaction CSV (20 students, 5 KCs)."""
    return resources.files("sbrkt").joinpath("assets", "toy.csv")
