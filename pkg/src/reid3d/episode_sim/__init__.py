"""Procedural paired-layout episodes with ground truth.

Synthetic apartments, an object catalog, layout sampling and modification,
egocentric tours, a coverage model and a surrogate detector producing
object maps with appearance descriptors.
"""
from .catalog import DEFAULT_CLASSES, SPLITS, Catalog, ObjectModel, make_catalog
from .dataset import (DEFAULT_SPLIT_SIZES, EPISODE_SCHEMA, EpisodeFactory, EpisodeFormatError, EpisodePair,
                      GroundTruth, SimConfig, generate_dataset, generate_episode, load_dataset_config,
                      load_episode, load_split)
from .detections import DetectionNoiseConfig, gt_box_map, observe_descriptors, simulate_detections
from .environment import Environment, GenerationError, Receptacle, make_environment
from .layout import (SUPERCATEGORIES, Layout, LayoutChange, PlacedObject, collisions, modify_layout,
                     sample_initial_layout, sample_transform, transform_layout_b)
from .tours import Tour, count_steps, coverage, sample_tour

__all__ = [
    "DEFAULT_CLASSES", "SPLITS", "Catalog", "ObjectModel", "make_catalog",
    "DEFAULT_SPLIT_SIZES", "EPISODE_SCHEMA", "EpisodeFactory", "EpisodeFormatError", "EpisodePair",
    "GroundTruth", "SimConfig", "generate_dataset", "generate_episode", "load_dataset_config",
    "load_episode", "load_split",
    "DetectionNoiseConfig", "gt_box_map", "observe_descriptors", "simulate_detections",
    "Environment", "GenerationError", "Receptacle", "make_environment",
    "SUPERCATEGORIES", "Layout", "LayoutChange", "PlacedObject", "collisions", "modify_layout",
    "sample_initial_layout", "sample_transform", "transform_layout_b",
    "Tour", "count_steps", "coverage", "sample_tour",
]
