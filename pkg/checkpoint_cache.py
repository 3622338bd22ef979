"""
Model Checkpoint Cache

Saves and loads recommender parameters.

Each checkpoint is two files:
- <name>.bin: little-endian binary, header (magic "CAU1", |V|, d, L as
  uint32) followed by the flat float64 parameter vector
- <name>.json: sidecar with the hyperparameters and seed used to build it

Usage:
    python checkpoint_cache.py model_rec.bin

Prints the header and sidecar of an existing checkpoint.
"""

import json
import logging
import struct
import sys
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from gru_model import HyperParams, ParamVector, flat_length

logger = logging.getLogger(__name__)

MAGIC = b"CAU1"
HEADER = struct.Struct("<4sIII")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(params: ParamVector, hp: HyperParams, path, extra: Dict[str, Any] = None) -> Path:
    """
    Write a checkpoint and its JSON sidecar.

    Args:
        params: Parameters to persist
        hp: Hyperparameters recorded in the sidecar
        path: Destination of the binary file
        extra: Optional additional sidecar fields (e.g. the run mode)

    Returns:
        Path to the binary checkpoint
    """
    path = Path(path)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, params.item_count, params.embed_dim, hp.max_prefix_len))
        f.write(params.flat.astype("<f8").tobytes())

    sidecar = {
        "item_count": params.item_count,
        "hyperparams": hp.model_dump(),
        "seed": hp.seed,
    }
    if extra:
        sidecar.update(extra)
    with open(sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)

    logger.debug(f"Saved checkpoint {path} ({params.flat.size} parameters)")
    return path


def read_header(path) -> Tuple[int, int, int]:
    """Return (|V|, d, L) from a checkpoint header."""
    with open(path, "rb") as f:
        raw = f.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise ValueError(f"Checkpoint {path} is truncated")
    magic, item_count, embed_dim, max_len = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"Checkpoint {path} has bad magic {magic!r}")
    return item_count, embed_dim, max_len


def load_checkpoint(path) -> Tuple[ParamVector, HyperParams]:
    """
    Load a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the checkpoint or its sidecar is missing
        ValueError: If the header or payload is inconsistent
    """
    path = Path(path)
    item_count, embed_dim, max_len = read_header(path)
    payload = np.fromfile(path, dtype="<f8", offset=HEADER.size)
    if payload.size != flat_length(item_count, embed_dim):
        raise ValueError(
            f"Checkpoint {path} holds {payload.size} values, expected {flat_length(item_count, embed_dim)}"
        )

    with open(sidecar_path(path)) as f:
        sidecar = json.load(f)
    hp = HyperParams(**sidecar["hyperparams"])
    if hp.embed_dim != embed_dim or hp.max_prefix_len != max_len:
        raise ValueError(f"Checkpoint {path} header disagrees with its sidecar")

    return ParamVector(payload.astype(np.float64), item_count, embed_dim), hp


def main():
    if len(sys.argv) != 2:
        print("Usage: python checkpoint_cache.py checkpoint.bin")
        sys.exit(2)

    try:
        item_count, embed_dim, max_len = read_header(sys.argv[1])
        with open(sidecar_path(sys.argv[1])) as f:
            sidecar = json.load(f)
    except (OSError, ValueError) as e:
        print(f"Error: {str(e)}")
        sys.exit(1)

    print(f"items={item_count} embed_dim={embed_dim} max_prefix_len={max_len}")
    print(json.dumps(sidecar, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
