"""
Checkpoint bundles: one TensorFile per `state_dict` entry plus `manifest.json`.

The manifest names every entry with its shape, the configuration the
module was built from and an md5 digest over the parameter bytes. A
stage-two bundle also records the digest of the autoencoder it was
trained against; loading it next to any other autoencoder is refused.
"""

from dataclasses import asdict, is_dataclass
import hashlib
import json
from pathlib import Path

from loguru import logger
import torch

from pyvptr.core import CheckpointError, TensorFileError, save_tensor, load_tensor

MANIFEST = "manifest.json"
SUFFIX = ".vtn"


def state_digest(state):
    """md5 hex digest over names and bytes of a module or state dict, in name order."""
    if isinstance(state, torch.nn.Module):
        state = state.state_dict()
    digest = hashlib.md5()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def save_bundle(directory, module, kind, config=None, **extra):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    entries = {}
    for name, tensor in state.items():
        tensor = tensor.detach().cpu()
        if not tensor.is_floating_point():
            continue
        save_tensor(directory / f"{name}{SUFFIX}", tensor)
        entries[name] = list(tensor.shape)
    manifest = {
        "kind": kind,
        "entries": entries,
        "config": asdict(config) if is_dataclass(config) else config,
        "digest": state_digest({name: state[name] for name in entries}),
        **extra,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Wrote {kind} checkpoint to {directory} ({len(entries)} tensors)")
    return manifest


def read_manifest(directory, kind=None):
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"No checkpoint manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"Corrupt checkpoint manifest {path}: {err}") from err
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{directory} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    return manifest


def load_state(directory, manifest):
    directory = Path(directory)
    state = {}
    for name, shape in manifest["entries"].items():
        try:
            tensor = load_tensor(directory / f"{name}{SUFFIX}")
        except (OSError, TensorFileError) as err:
            raise CheckpointError(f"Cannot read checkpoint entry {name!r} from {directory}: {err}") from err
        if list(tensor.shape) != shape:
            raise CheckpointError(f"Entry {name!r} has shape {list(tensor.shape)}, manifest says {shape}")
        state[name] = tensor
    if state_digest(state) != manifest["digest"]:
        raise CheckpointError(f"Parameter digest of {directory} does not match its manifest")
    return state


def load_bundle(directory, build, kind=None):
    """Rebuild a module with `build(manifest)` and load its parameters.

    Returns `(module, manifest)`.
    """
    manifest = read_manifest(directory, kind)
    module = build(manifest)
    state = load_state(directory, manifest)
    missing, unexpected = module.load_state_dict(state, strict=False)
    missing = [name for name in missing if name in module.state_dict() and module.state_dict()[name].is_floating_point()]
    if missing or unexpected:
        raise CheckpointError(f"Checkpoint {directory} does not fit its model: missing {missing}, unexpected {unexpected}")
    logger.info(f"Loaded {manifest['kind']} checkpoint from {directory}")
    return module, manifest
