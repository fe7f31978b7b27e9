"""Import decoded containers back into a framework model skeleton."""

from __future__ import annotations

import torch

from .container_io import read_container
from .errors import ShapeMismatch
from .exporter import export_model
from .models import TinyDecoder


def import_container(container_path, skeleton: TinyDecoder) -> TinyDecoder:
    """Load container tensors into the skeleton; shapes must match exactly."""
    _, layers = read_container(container_path)
    _, manifest = export_model(skeleton)  # reuse the export layout for the mapping
    if len(layers) != manifest.n_layers:
        raise ShapeMismatch(
            f"container has {len(layers)} layers, skeleton expects {manifest.n_layers}")
    state = skeleton.state_dict()
    new_state = {}
    for li, tensors in enumerate(layers, start=1):
        for cname, arr in tensors.items():
            fname = manifest.name_map.get(f"L{li}/{cname}")
            if fname is None:
                raise ShapeMismatch(f"container tensor L{li}/{cname} has no home "
                                    "in the skeleton")
            expected = tuple(state[fname].shape)
            if tuple(arr.shape) != expected:
                raise ShapeMismatch(
                    f"{fname}: container shape {tuple(arr.shape)} != skeleton {expected}")
            new_state[fname] = torch.from_numpy(arr.copy())
    missing = set(state) - set(new_state)
    if missing:
        raise ShapeMismatch(f"container is missing tensors: {sorted(missing)}")
    skeleton.load_state_dict(new_state)
    skeleton.eval()
    return skeleton
