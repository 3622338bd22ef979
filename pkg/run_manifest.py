"""
Stage manifests.

Every stage writes <stage>.manifest.json next to its outputs, recording:
- the resolved config it ran with
- the md5 digest of every input and output file
- the digest of each upstream manifest it consumed

A manifest's own digest is the md5 of its canonical JSON, so the manifests
form a hash chain. A downstream stage refuses to run when an upstream
manifest is missing (DependencyError), when a file or upstream manifest
no longer matches what was recorded, or when the config it runs with
disagrees with the config the upstream stage recorded (StalenessError).

Manifests never hold timestamps or timings, so rerunning a stage on
unchanged inputs rewrites an identical file. A CSV output may name
volatile columns (wall-clock seconds); its digest then covers every other
column only.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import pandas as pd

from cau_utils import DependencyError, StalenessError, file_digest, hash_lines

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


def manifest_path(out_dir, stage: str) -> Path:
    return Path(out_dir) / f"{stage}{MANIFEST_SUFFIX}"


def _canonical(body: Dict[str, Any]) -> str:
    return json.dumps(body, indent=2, sort_keys=True)


def _body_digest(body: Dict[str, Any]) -> str:
    return hash_lines(_canonical(body).splitlines())


def _digest(path: Path, volatile_columns: Sequence[str] = ()) -> str:
    if not volatile_columns:
        return file_digest(path)
    frame = pd.read_csv(path).drop(columns=list(volatile_columns), errors="ignore")
    return hash_lines(frame.to_csv(index=False, float_format="%.10f", lineterminator="\n").splitlines())


def _file_entries(out_dir: Path, files: Dict[str, Path],
                  volatile: Optional[Dict[str, Sequence[str]]] = None) -> Dict[str, Dict[str, Any]]:
    volatile = volatile or {}
    entries = {}
    for name, path in sorted(files.items()):
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"Expected file {path} for '{name}' does not exist")
        try:
            shown = str(path.resolve().relative_to(out_dir.resolve()))
        except ValueError:
            shown = str(path)
        entries[name] = {"path": shown, "digest": _digest(path, volatile.get(name, ()))}
        if volatile.get(name):
            entries[name]["volatile_columns"] = list(volatile[name])
    return entries


def write_manifest(out_dir, stage: str, config: Dict[str, Any], outputs: Dict[str, Path],
                   inputs: Optional[Dict[str, Path]] = None, upstream: Sequence[str] = (),
                   volatile: Optional[Dict[str, Sequence[str]]] = None) -> Dict[str, Any]:
    """
    Write the manifest of a finished stage.

    Args:
        out_dir: Run directory holding every stage's outputs
        stage: Stage name (prep, train, unlearn, eval, ablate, synth)
        config: Resolved configuration, as JSON-ready data
        outputs: Files the stage produced, by name
        inputs: External input files (e.g. the raw dataset), by name
        upstream: Stages whose manifests this stage consumed
        volatile: CSV output name -> columns left out of its digest

    Returns:
        The manifest, including its digest
    """
    out_dir = Path(out_dir)
    body = {
        "stage": stage,
        "config": config,
        "inputs": _file_entries(out_dir, inputs or {}),
        "outputs": _file_entries(out_dir, outputs, volatile),
        "upstream": {name: load_manifest(out_dir, name)["digest"] for name in sorted(upstream)},
    }
    manifest = dict(body, digest=_body_digest(body))
    with open(manifest_path(out_dir, stage), "w", encoding="utf-8", newline="\n") as f:
        f.write(_canonical(manifest) + "\n")
    logger.debug(f"Wrote {stage} manifest {manifest['digest']}")
    return manifest


def load_manifest(out_dir, stage: str) -> Dict[str, Any]:
    """
    Read a stage manifest and check its self-digest.

    Raises:
        DependencyError: If the stage has not been run in out_dir
        StalenessError: If the manifest was edited after it was written
    """
    path = manifest_path(out_dir, stage)
    if not path.exists():
        raise DependencyError(f"Stage '{stage}' has no manifest in {out_dir}; run it first")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    body = {k: v for k, v in manifest.items() if k != "digest"}
    if _body_digest(body) != manifest.get("digest"):
        raise StalenessError(f"Manifest {path} does not match its recorded digest")
    return manifest


def check_config(manifest: Dict[str, Any], config: Dict[str, Any]) -> None:
    """
    Compare a stage's recorded config with the config a downstream stage runs with.

    Only the top-level keys both sides carry are compared.

    Raises:
        StalenessError: If any shared key differs
    """
    recorded = manifest["config"]
    changed = sorted(key for key in set(recorded) & set(config) if recorded[key] != config[key])
    if changed:
        raise StalenessError(
            f"Stage '{manifest['stage']}' ran with a different {', '.join(changed)}; "
            f"rerun '{manifest['stage']}' with this config"
        )


def require_stage(out_dir, stage: str, config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Load an upstream stage and verify its whole chain is still current.

    Every output file must match its recorded digest, and every manifest the
    stage consumed must still carry the digest recorded for it.

    Args:
        out_dir: Run directory
        stage: Upstream stage name
        config: Config sections of the calling stage; sections the upstream
            stage also recorded must be equal

    Raises:
        DependencyError: If the stage (or one it depends on) is missing
        StalenessError: If a file, upstream manifest or shared config section changed since
    """
    out_dir = Path(out_dir)
    manifest = load_manifest(out_dir, stage)
    if config is not None:
        check_config(manifest, config)
    for name, entry in manifest["outputs"].items():
        path = out_dir / entry["path"]
        if not path.exists():
            raise DependencyError(f"Output '{name}' of stage '{stage}' is missing: {path}")
        if _digest(path, entry.get("volatile_columns", ())) != entry["digest"]:
            raise StalenessError(f"Output '{name}' of stage '{stage}' changed since it was written: {path}")
    for name, digest in manifest["upstream"].items():
        if require_stage(out_dir, name)["digest"] != digest:
            raise StalenessError(f"Stage '{stage}' was built from an older '{name}' run; rerun '{stage}'")
    return manifest


def output_path(out_dir, manifest: Dict[str, Any], name: str) -> Path:
    return Path(out_dir) / manifest["outputs"][name]["path"]
