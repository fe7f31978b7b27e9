"""TOML config file: one document holding every codec knob plus block specs."""

from __future__ import annotations

from dataclasses import fields

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent
    import tomli as tomllib

from .align import AlignConfig
from .blocks import BlockMember, BlockTypeSpec
from .codec import CodecConfig
from .entropy import EntropyFitConfig
from .errors import ManifestParse
from .predictor import TrainConfig


def _fill(cls, table: dict, rename: dict | None = None):
    rename = rename or {}
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, val in table.items():
        name = rename.get(key, key)
        if name not in known:
            raise ManifestParse(f"unknown {cls.__name__} key {key!r}")
        kwargs[name] = val
    return kwargs


def parse_config(doc: dict) -> tuple[CodecConfig, list[BlockTypeSpec], dict]:
    codec_kwargs = _fill(CodecConfig, doc.get("codec", {}), rename={"lambda": "lam"})
    codec_kwargs.pop("align", None)
    codec_kwargs.pop("train", None)
    codec_kwargs.pop("entropy_fit", None)
    cfg = CodecConfig(
        align=AlignConfig(**_fill(AlignConfig, doc.get("align", {}))),
        train=TrainConfig(**_fill(TrainConfig, doc.get("train", {}))),
        entropy_fit=EntropyFitConfig(**_fill(EntropyFitConfig, doc.get("entropy_fit", {}))),
        **codec_kwargs,
    )
    specs = []
    for entry in doc.get("blocks", []):
        members = [BlockMember(str(name), int(axis)) for name, axis in entry["members"]]
        specs.append(BlockTypeSpec(
            type_id=int(entry["type_id"]), members=members,
            block_count=None if entry.get("block_count") is None
            else int(entry["block_count"])))
    extras = {k: v for k, v in doc.items()
              if k not in ("codec", "align", "train", "entropy_fit", "blocks")}
    return cfg, specs, extras


def load_config(path) -> tuple[CodecConfig, list[BlockTypeSpec], dict]:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ManifestParse(f"{path}: {exc}") from exc
    return parse_config(doc)
