"""Satellite-ground fusion and transformer regression of gridded NO2/SO2 fields."""
from .grid import GridSpec, Field, FieldStack, StationRecord, cell_of, regrid_stations, NO2_GRID, SO2_GRID
from .fusion import FusionParams, gap_fill
from .vit import ViTConfig, ViTRegressor
from .training import TrainConfig, kfold_split, train, evaluate, linear_baseline

__version__ = "0.1.0"
