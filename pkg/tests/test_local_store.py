"""Tests for services/local_store.py — checkpoints, CSV tables, PPM datasets, reports."""

import json
import logging

import numpy as np
import pytest

from config import REPORT_SCHEMA_VERSION
from services import local_store
from services.imaging import write_ppm
from services.local_store import DatasetError
from services.metrics import AttackRecord
from services.model import CheckpointError, LinearClassifier
from tests.conftest import make_grey_image, make_linear_model


class TestResolve:
    def test_relative_paths_go_under_the_data_dir(self, tmp_data_dir):
        assert local_store.resolve("a/b.json") == tmp_data_dir / "a" / "b.json"

    def test_absolute_paths_are_kept(self, tmp_path):
        assert local_store.resolve(tmp_path / "x") == tmp_path / "x"


class TestCheckpoints:
    def test_round_trip(self, tmp_data_dir):
        m = make_linear_model(seed=3)
        path = local_store.save_checkpoint("models/lin.ckpt", m)
        assert path == tmp_data_dir / "models" / "lin.ckpt"
        restored = local_store.load_checkpoint("models/lin.ckpt")
        assert isinstance(restored, LinearClassifier)
        assert np.array_equal(restored.weight, m.weight)

    def test_missing_file_is_a_checkpoint_error(self):
        with pytest.raises(CheckpointError, match="could not read"):
            local_store.load_checkpoint("nope.ckpt")

    def test_no_temp_files_left_behind(self, tmp_data_dir):
        local_store.save_checkpoint("m.ckpt", make_linear_model())
        assert [p.name for p in tmp_data_dir.iterdir()] == ["m.ckpt"]


class TestRecordTables:
    def test_records_round_trip(self):
        records = [
            AttackRecord("a", True, 0.1 + 0.2, 17),
            AttackRecord("b", False, None, 100),
            AttackRecord("c", True, 0.0, 0),
        ]
        local_store.write_records("wb.csv", records)
        assert local_store.read_records("wb.csv") == records

    def test_record_layout(self, tmp_data_dir):
        local_store.write_records("wb.csv", [AttackRecord("a", True, 1.5, 3), AttackRecord("b", False, None, 4)])
        lines = (tmp_data_dir / "wb.csv").read_text().splitlines()
        assert lines == ["image_id,success,distortion,cost", "a,1,1.5,3", "b,0,,4"]

    def test_wrong_header_raises(self, tmp_data_dir):
        (tmp_data_dir / "bad.csv").write_text("id,ok\na,1\n")
        with pytest.raises(DatasetError, match="expected columns"):
            local_store.read_records("bad.csv")

    def test_unparseable_row_names_the_line(self, tmp_data_dir):
        (tmp_data_dir / "bad.csv").write_text("image_id,success,distortion,cost\na,1,1.5,3\nb,1,oops,4\n")
        with pytest.raises(DatasetError, match=r"bad.csv:3"):
            local_store.read_records("bad.csv")

    def test_negative_cost_is_a_dataset_error(self, tmp_data_dir):
        (tmp_data_dir / "bad.csv").write_text("image_id,success,distortion,cost\na,0,,-1\n")
        with pytest.raises(DatasetError, match="negative cost"):
            local_store.read_records("bad.csv")

    def test_short_trajectory_row(self, tmp_data_dir):
        (tmp_data_dir / "t.csv").write_text("image_id,query_index,distortion\na,3\n")
        with pytest.raises(DatasetError, match="t.csv:2"):
            local_store.read_trajectories("t.csv")

    def test_trajectories_round_trip(self):
        trajectories = {"img-2": [(101, 30.5), (140, 22.25)], "img-1": [(1, 0.0)]}
        local_store.write_trajectories("t.csv", trajectories)
        assert local_store.read_trajectories("t.csv") == trajectories

    def test_trajectories_are_sorted_by_image(self, tmp_data_dir):
        local_store.write_trajectories("t.csv", {"b": [(3, 1.0)], "a": [(2, 2.0)]})
        lines = (tmp_data_dir / "t.csv").read_text().splitlines()
        assert lines[1].startswith("a,") and lines[2].startswith("b,")


class TestPpmDataset:
    def _write_dataset(self, root, labels):
        root.mkdir(parents=True, exist_ok=True)
        rows = ["filename,label"]
        for i, label in enumerate(labels):
            write_ppm(root / f"im{i}.ppm", make_grey_image(seed=i))
            rows.append(f"im{i}.ppm,{label}")
        (root / "labels.csv").write_text("\n".join(rows) + "\n")

    def test_loads_in_listed_order(self, tmp_data_dir):
        self._write_dataset(tmp_data_dir / "ds", [1, 0, 1])
        samples = local_store.load_ppm_dataset("ds")
        assert [s.image_id for s in samples] == ["im0", "im1", "im2"]
        assert [s.label for s in samples] == [1, 0, 1]
        assert samples[2].image == make_grey_image(seed=2)

    def test_missing_labels_file(self, tmp_data_dir):
        (tmp_data_dir / "empty").mkdir()
        with pytest.raises(DatasetError, match="labels.csv"):
            local_store.load_ppm_dataset("empty")

    def test_missing_image(self, tmp_data_dir):
        self._write_dataset(tmp_data_dir / "ds", [0])
        (tmp_data_dir / "ds" / "im0.ppm").unlink()
        with pytest.raises(DatasetError, match="im0.ppm"):
            local_store.load_ppm_dataset("ds")

    def test_corrupt_image(self, tmp_data_dir):
        self._write_dataset(tmp_data_dir / "ds", [0])
        (tmp_data_dir / "ds" / "im0.ppm").write_bytes(b"P6\n8 8\n255\n" + bytes(10))
        with pytest.raises(DatasetError):
            local_store.load_ppm_dataset("ds")

    @pytest.mark.parametrize("label", ["x", "-1"])
    def test_bad_label(self, tmp_data_dir, label):
        self._write_dataset(tmp_data_dir / "ds", [0])
        (tmp_data_dir / "ds" / "labels.csv").write_text(f"filename,label\nim0.ppm,{label}\n")
        with pytest.raises(DatasetError):
            local_store.load_ppm_dataset("ds")


class TestReports:
    PAYLOAD = {"eta0": 0.9, "whitebox": {"curve": {"d_half": 1.25}}, "records": [1, 2]}

    def test_round_trip(self):
        local_store.save_report("r.json", self.PAYLOAD, {"total": 1.5})
        doc = local_store.load_report("r.json")
        assert doc["payload"] == self.PAYLOAD
        assert doc["schema_version"] == REPORT_SCHEMA_VERSION
        assert doc["payload_sha256"] == local_store.payload_digest(self.PAYLOAD)
        assert doc["timings"] == {"total": 1.5}

    def test_digest_ignores_key_order(self):
        reordered = {"records": [1, 2], "whitebox": {"curve": {"d_half": 1.25}}, "eta0": 0.9}
        assert local_store.payload_digest(reordered) == local_store.payload_digest(self.PAYLOAD)

    def test_timings_are_outside_the_hash(self):
        local_store.save_report("a.json", self.PAYLOAD, {"total": 1.0})
        local_store.save_report("b.json", self.PAYLOAD, {"total": 99.0})
        assert local_store.load_report("a.json")["payload_sha256"] == local_store.load_report("b.json")["payload_sha256"]

    def test_tampered_payload_raises(self, tmp_data_dir):
        local_store.save_report("r.json", self.PAYLOAD, {})
        doc = json.loads((tmp_data_dir / "r.json").read_text())
        doc["payload"]["eta0"] = 0.95
        (tmp_data_dir / "r.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="sha256"):
            local_store.load_report("r.json")

    def test_schema_mismatch_raises(self, tmp_data_dir):
        local_store.save_report("r.json", self.PAYLOAD, {})
        doc = json.loads((tmp_data_dir / "r.json").read_text())
        doc["schema_version"] = REPORT_SCHEMA_VERSION + 1
        (tmp_data_dir / "r.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="schema"):
            local_store.load_report("r.json")

    def test_unreadable_report_is_empty_with_warning(self, tmp_data_dir, caplog):
        (tmp_data_dir / "broken.json").write_text("{not json")
        with caplog.at_level(logging.WARNING, logger="services.local_store"):
            assert local_store.load_report("broken.json") == {}
        assert "could not read" in caplog.text

    def test_missing_report_is_empty(self):
        assert local_store.load_report("missing.json") == {}

    def test_nan_is_rejected(self):
        with pytest.raises(ValueError):
            local_store.save_report("r.json", {"d_half": float("nan")}, {})


class TestPlainFiles:
    def test_table_round_trip(self):
        local_store.write_table("t.csv", ("a", "b"), [(1, "x"), (2, "y")])
        assert local_store.read_table("t.csv", ("a", "b")) == [{"a": "1", "b": "x"}, {"a": "2", "b": "y"}]

    def test_text_and_json(self, tmp_data_dir):
        local_store.save_text("out/t.txt", "hello\n")
        local_store.save_json("out/m.json", {"files": ["t.txt"]})
        assert (tmp_data_dir / "out" / "t.txt").read_text() == "hello\n"
        assert json.loads((tmp_data_dir / "out" / "m.json").read_text()) == {"files": ["t.txt"]}
