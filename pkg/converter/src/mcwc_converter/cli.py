"""CLI entry points: mcwc-export and mcwc-import."""

from __future__ import annotations

import argparse
import sys

from .errors import ConverterError
from .exporter import export_container
from .importer import import_container
from .models import load_model, save_model


def export_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="mcwc-export",
                                description="export a framework checkpoint to a container")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True, help="container path")
    p.add_argument("--spec", required=True, help="block-spec JSON output path")
    p.add_argument("--config-toml", help="also emit a codec config with the block specs")
    p.add_argument("--arch", default="tiny-decoder")
    args = p.parse_args(argv)
    try:
        manifest = export_container(args.model, args.output, args.spec, args.arch,
                                    config_toml_path=args.config_toml)
    except ConverterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.output} ({manifest.n_layers} layers) and {args.spec}")
    if manifest.uncovered:
        print(f"uncovered tensors (coded as raw keyframe records): "
              f"{', '.join(manifest.uncovered)}")
    return 0


def import_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="mcwc-import",
                                description="load a container back into a model skeleton")
    p.add_argument("container")
    p.add_argument("--skeleton", required=True, help="framework model file for shapes")
    p.add_argument("-o", "--output", required=True, help="framework model output path")
    args = p.parse_args(argv)
    try:
        model = load_model(args.skeleton)
        model = import_container(args.container, model)
        save_model(model, args.output)
    except ConverterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.output}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(export_main())
