"""Virtual-bevameter calibration of a soil contact model against DEM."""
from importlib.resources import files

__version__ = "0.1.0"


def data_path(name: str):
    """Path of a bundled fixture (``reference_tables.csv``, ``reference_params.txt``)."""
    return files(__name__) / "data" / name
