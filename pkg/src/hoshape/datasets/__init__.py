"""Dataset adapters and the procedural toy-scene generator."""

from .adapters import FORMATS, FrameRecord, LoadedFrame, LoadResult, load_frame, load_manifest
from .toy import ToySceneConfig, generate_toy_scene, render_toy_views, write_toy_dataset

__all__ = [
    "FORMATS", "FrameRecord", "LoadedFrame", "LoadResult", "load_frame", "load_manifest",
    "ToySceneConfig", "generate_toy_scene", "render_toy_views", "write_toy_dataset",
]
