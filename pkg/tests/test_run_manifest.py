import json

import pytest

from cau_utils import DependencyError, StalenessError
from run_manifest import load_manifest, manifest_path, output_path, require_stage, write_manifest


@pytest.fixture
def chain(tmp_path):
    """A prep stage and a train stage built on it."""
    (tmp_path / "train.txt").write_text("items=2 sessions=1\n1\t1 2\n")
    write_manifest(tmp_path, "prep", {"min_count": 5}, {"train": tmp_path / "train.txt"})
    (tmp_path / "model_rec.bin").write_bytes(b"\x00\x01")
    write_manifest(tmp_path, "train", {"epochs": 1}, {"model": tmp_path / "model_rec.bin"}, upstream=["prep"])
    return tmp_path


def test_round_trip(chain):
    manifest = require_stage(chain, "train")
    assert manifest["stage"] == "train"
    assert manifest["upstream"] == {"prep": load_manifest(chain, "prep")["digest"]}
    assert output_path(chain, manifest, "model") == chain / "model_rec.bin"
    assert manifest["outputs"]["model"]["path"] == "model_rec.bin"


def test_rewrite_is_byte_identical(chain):
    before = manifest_path(chain, "train").read_bytes()
    write_manifest(chain, "train", {"epochs": 1}, {"model": chain / "model_rec.bin"}, upstream=["prep"])
    assert manifest_path(chain, "train").read_bytes() == before


def test_missing_stage(tmp_path):
    with pytest.raises(DependencyError):
        require_stage(tmp_path, "prep")


def test_missing_output_file(tmp_path):
    with pytest.raises(DependencyError):
        write_manifest(tmp_path, "prep", {}, {"train": tmp_path / "train.txt"})


def test_modified_output(chain):
    (chain / "model_rec.bin").write_bytes(b"\x00\x02")
    with pytest.raises(StalenessError):
        require_stage(chain, "train")


def test_deleted_output(chain):
    (chain / "model_rec.bin").unlink()
    with pytest.raises(DependencyError):
        require_stage(chain, "train")


def test_upstream_rerun_with_new_config(chain):
    write_manifest(chain, "prep", {"min_count": 3}, {"train": chain / "train.txt"})
    with pytest.raises(StalenessError):
        require_stage(chain, "train")


def test_upstream_file_changed(chain):
    (chain / "train.txt").write_text("items=2 sessions=1\n1\t2 1\n")
    with pytest.raises(StalenessError):
        require_stage(chain, "train")


def test_hand_edited_manifest(chain):
    path = manifest_path(chain, "prep")
    data = json.loads(path.read_text())
    data["config"]["min_count"] = 1
    path.write_text(json.dumps(data))
    with pytest.raises(StalenessError):
        load_manifest(chain, "prep")


def test_no_timings_recorded(chain):
    text = manifest_path(chain, "train").read_text()
    assert "seconds" not in text and "time" not in text


def test_shared_config_must_match(chain):
    require_stage(chain, "prep", {"min_count": 5, "epochs": 3})
    with pytest.raises(StalenessError, match="min_count"):
        require_stage(chain, "prep", {"min_count": 3})


def test_volatile_columns_left_out_of_digest(tmp_path):
    table = tmp_path / "ablation.csv"
    table.write_text("run,recall@10,seconds\ncau,0.5000000000,1.2500000000\n")
    first = write_manifest(tmp_path, "ablate", {}, {"ablation": table}, volatile={"ablation": ["seconds"]})
    table.write_text("run,recall@10,seconds\ncau,0.5000000000,9.7500000000\n")
    assert require_stage(tmp_path, "ablate")["digest"] == first["digest"]
    assert write_manifest(tmp_path, "ablate", {}, {"ablation": table},
                          volatile={"ablation": ["seconds"]})["digest"] == first["digest"]

    table.write_text("run,recall@10,seconds\ncau,0.2500000000,9.7500000000\n")
    with pytest.raises(StalenessError):
        require_stage(tmp_path, "ablate")
