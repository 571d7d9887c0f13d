from .assets import write_reference_assets
from .contact_field import build_contact_field, patch_nbytes
from .errors import ConfigError, ContactFieldError, GraspError, HandModelError, MeshError
from .extractors import HandExtractor, MeshExtractor
from .kinematics import load_hand
from .pipeline import (
    Grasp,
    GraspDataset,
    GraspSynthesizer,
    SearchCache,
    get_index,
    load_object_samples,
    run_batch,
)
from .report_generator import HTMLReportGenerator, export_grasp_objs
from .validator import validate_dataset, validate_grasp

__all__ = [
    "GraspSynthesizer",
    "GraspDataset",
    "Grasp",
    "SearchCache",
    "run_batch",
    "get_index",
    "load_object_samples",
    "load_hand",
    "build_contact_field",
    "patch_nbytes",
    "validate_dataset",
    "validate_grasp",
    "HTMLReportGenerator",
    "export_grasp_objs",
    "write_reference_assets",
    "HandExtractor",
    "MeshExtractor",
    "GraspError",
    "MeshError",
    "HandModelError",
    "ContactFieldError",
    "ConfigError",
]
