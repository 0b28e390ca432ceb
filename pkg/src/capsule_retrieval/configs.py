"""Named architecture configurations and their JSON file format.

Four named configurations ship with the package:

- ``sc-tiny`` / ``rc-tiny``: three convolutions on 32x32 inputs, four
  classes, under 100k parameters; sized for tests and desk-scale runs.
- ``sc-full`` / ``rc-full``: 224x224 inputs, 23 classes, sized to land near
  2.5M and 4.5M trainable parameters respectively.

Configs are plain data; ``config_to_json`` / ``config_from_json`` round-trip
the schema documented in docs/formats.md.
"""

from __future__ import annotations

import json

from capsule_retrieval.backbones import BackboneConfig, LayerSpec, NetworkConfig

__all__ = ["CONFIG_NAMES", "named_config", "config_to_json", "config_from_json"]

CONFIG_NAMES = ("sc-tiny", "rc-tiny", "sc-full", "rc-full")


def _sc_tiny() -> NetworkConfig:
    return NetworkConfig(
        backbone=BackboneConfig(
            kind="sc",
            layers=[
                LayerSpec(8, 3, 2, 1),
                LayerSpec(16, 3, 2, 1),
                LayerSpec(16, 3, 1, 1),
            ],
            input_resolution=(32, 32),
        ),
        num_classes=4,
        primary_channels=8,
    )


def _rc_tiny() -> NetworkConfig:
    return NetworkConfig(
        backbone=BackboneConfig(
            kind="rc",
            layers=[
                LayerSpec(8, 3, 2, 1),   # stem
                LayerSpec(16, 3, 2, 1),  # one residual block (two convs)
            ],
            input_resolution=(32, 32),
        ),
        num_classes=4,
        primary_channels=8,
    )


def _sc_full() -> NetworkConfig:
    return NetworkConfig(
        backbone=BackboneConfig(
            kind="sc",
            layers=[
                LayerSpec(32, 3, 2, 1),
                LayerSpec(64, 3, 2, 1),
                LayerSpec(96, 3, 2, 1),
                LayerSpec(128, 3, 2, 1),
                LayerSpec(160, 3, 2, 1),
            ],
            input_resolution=(224, 224),
        ),
        num_classes=23,
    )


def _rc_full() -> NetworkConfig:
    return NetworkConfig(
        backbone=BackboneConfig(
            kind="rc",
            layers=[
                LayerSpec(64, 7, 2, 3),   # stem
                LayerSpec(64, 3, 2, 1),
                LayerSpec(128, 3, 2, 1),
                LayerSpec(192, 3, 2, 1),
                LayerSpec(256, 3, 2, 1),
            ],
            input_resolution=(224, 224),
        ),
        num_classes=23,
    )


_BUILDERS = {
    "sc-tiny": _sc_tiny,
    "rc-tiny": _rc_tiny,
    "sc-full": _sc_full,
    "rc-full": _rc_full,
}


def named_config(name: str, num_classes=None, input_resolution=None) -> NetworkConfig:
    """Fresh copy of a named configuration, optionally re-targeted to a dataset."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown architecture {name!r}; choose from {CONFIG_NAMES}")
    cfg = _BUILDERS[name]()
    if num_classes is not None:
        cfg.num_classes = int(num_classes)
    if input_resolution is not None:
        cfg.backbone.input_resolution = (int(input_resolution[0]), int(input_resolution[1]))
    return cfg


def config_to_json(cfg: NetworkConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def config_from_json(text: str) -> NetworkConfig:
    return NetworkConfig.from_dict(json.loads(text))
