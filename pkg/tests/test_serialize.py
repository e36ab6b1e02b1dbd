"""File formats: stamped JSON, dataset CSV round trips, digests, manifests."""

from __future__ import annotations

import json

import numpy as np
import pytest

from sgmoe.dendrogram import build_path
from sgmoe.errors import InputError
from sgmoe.estimation import FitResult
from sgmoe.model import Dataset
from sgmoe.selection import SelectionReport
from sgmoe.serialize import (
    RunManifest,
    file_digest,
    fnv1a64,
    load_dataset_csv,
    load_dendrogram,
    load_fit,
    load_manifest,
    load_model,
    load_model_or_fit,
    load_report,
    save_dendrogram,
    save_fit,
    save_manifest,
    save_model,
    save_report,
    write_dataset_csv,
)

from helpers import g0_three_expert, g0_two_expert, random_measure


def measures_equal(a, b) -> bool:
    if a.dim != b.dim or a.n_atoms != b.n_atoms:
        return False
    for x, y in zip(a.atoms, b.atoms):
        if (x.omega0, x.b, x.sigma) != (y.omega0, y.b, y.sigma):
            return False
        if not (np.array_equal(x.omega1, y.omega1)
                and np.array_equal(x.a, y.a)):
            return False
    return True


class TestStampedJson:
    def test_model_round_trip_bit_faithful(self, tmp_path):
        rng = np.random.default_rng(0)
        m = random_measure(rng, k=3, dim=2)
        p = tmp_path / "m.json"
        save_model(m, p)
        assert measures_equal(load_model(p), m)
        doc = json.loads(p.read_text())
        assert doc["format"] == "sgmoe/model/v1"

    def test_awkward_floats_survive(self, tmp_path):
        from helpers import make_measure
        m = make_measure([(0.1 + 0.2, (1e-300,), (-1.0000000000000002,),
                           1 / 3, 5e-324 + 0.7)])
        p = tmp_path / "m.json"
        save_model(m, p)
        assert measures_equal(load_model(p), m)

    def test_fit_round_trip(self, tmp_path):
        fit = FitResult(model=g0_two_expert(),
                        loglik_trace=(-2.5, -2.25, -2.249999),
                        iterations=2, converged=True)
        p = tmp_path / "f.json"
        save_fit(fit, p)
        back = load_fit(p)
        assert back.loglik_trace == fit.loglik_trace
        assert back.iterations == 2 and back.converged

    def test_dendrogram_round_trip(self, tmp_path):
        dg = build_path(g0_three_expert())
        p = tmp_path / "d.json"
        save_dendrogram(dg, p)
        back = load_dendrogram(p)
        assert back.heights == dg.heights
        assert [m.pair for m in back.merges] == [m.pair for m in dg.merges]
        assert measures_equal(back.level(1), dg.level(1))

    def test_report_round_trip(self, tmp_path):
        rep = SelectionReport(method="dsc", per_level={2: -1.5, 3: 0.25},
                              chosen=2, epsilon_n=9.2)
        p = tmp_path / "r.json"
        save_report(rep, p)
        back = load_report(p)
        assert back.per_level == rep.per_level
        assert back.chosen == 2 and back.epsilon_n == 9.2

    def test_model_or_fit_accepts_both(self, tmp_path):
        m = g0_two_expert()
        save_model(m, tmp_path / "m.json")
        fit = FitResult(model=m, loglik_trace=(-1.0,), iterations=0,
                        converged=False)
        save_fit(fit, tmp_path / "f.json")
        assert measures_equal(load_model_or_fit(tmp_path / "m.json"), m)
        assert measures_equal(load_model_or_fit(tmp_path / "f.json"), m)

    def test_unknown_major_rejected(self, tmp_path):
        p = tmp_path / "m.json"
        save_model(g0_two_expert(), p)
        doc = json.loads(p.read_text())
        doc["format"] = "sgmoe/model/v2"
        p.write_text(json.dumps(doc))
        with pytest.raises(InputError, match="major version"):
            load_model(p)

    def test_kind_mismatch_rejected(self, tmp_path):
        p = tmp_path / "m.json"
        save_model(g0_two_expert(), p)
        with pytest.raises(InputError, match="document"):
            load_dendrogram(p)

    def test_missing_stamp_and_bad_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{}")
        with pytest.raises(InputError, match="format stamp"):
            load_model(p)
        p.write_text("{nope")
        with pytest.raises(InputError, match="JSON"):
            load_model(p)
        with pytest.raises(InputError, match="no such file"):
            load_model(tmp_path / "absent.json")


class TestDatasetCsv:
    def test_two_row_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,y\n0.5,1.25\n-0.25,2.0\n")
        data = load_dataset_csv(p)
        assert data.n == 2 and data.dim == 1
        assert data.xs[1, 0] == -0.25 and data.ys[0] == 1.25

    def test_round_trip_17_digits(self, tmp_path):
        rng = np.random.default_rng(7)
        data = Dataset(xs=rng.normal(size=(1000, 3)) * 10.0 ** rng.integers(
            -8, 8, size=(1000, 3)), ys=rng.normal(size=1000))
        p = tmp_path / "d.csv"
        write_dataset_csv(data, p)
        back = load_dataset_csv(p)
        assert np.array_equal(back.xs, data.xs)
        assert np.array_equal(back.ys, data.ys)

    def test_nan_on_line_3_is_named(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,y\n0.5,1.0\n0.25,nan\n0.1,2.0\n")
        with pytest.raises(InputError, match="line 3"):
            load_dataset_csv(p)

    def test_inf_rejected(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,y\ninf,1.0\n")
        with pytest.raises(InputError, match="line 2"):
            load_dataset_csv(p)

    def test_bad_token_names_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,y\n0.5,1.0\nabc,2.0\n")
        with pytest.raises(InputError, match="line 3"):
            load_dataset_csv(p)

    def test_wrong_column_count_names_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,x2,y\n0.5,1.0,2.0\n0.5,1.0\n")
        with pytest.raises(InputError, match="line 3"):
            load_dataset_csv(p)

    def test_empty_and_header_only(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("")
        with pytest.raises(InputError, match="empty"):
            load_dataset_csv(p)
        p.write_text("x1,y\n")
        with pytest.raises(InputError, match="no data rows"):
            load_dataset_csv(p)

    def test_header_checked_unless_y_last(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("protein,trait\n0.5,1.0\n")
        with pytest.raises(InputError, match="line 1"):
            load_dataset_csv(p)
        data = load_dataset_csv(p, y_last=True)
        assert data.n == 1 and data.ys[0] == 1.0


class TestDigests:
    def test_known_fnv_vectors(self):
        assert fnv1a64(b"") == "cbf29ce484222325"
        assert fnv1a64(b"a") == "af63dc4c8601ec8c"
        assert fnv1a64(b"foobar") == "85944171f73967e8"

    def test_file_digest(self, tmp_path):
        p = tmp_path / "blob"
        p.write_bytes(b"foobar")
        assert file_digest(p) == "85944171f73967e8"
        with pytest.raises(InputError):
            file_digest(tmp_path / "missing")


class TestManifest:
    def test_round_trip(self, tmp_path):
        man = RunManifest(command="simulate", config={"n": 10, "seed": 3},
                          seed=3, version="v0.1.0",
                          started="2026-08-15T10:00:00+00:00",
                          finished="2026-08-15T10:00:01+00:00",
                          inputs={}, outputs={"d.csv": "cbf29ce484222325"},
                          argv=("simulate", "--n", "10"))
        p = tmp_path / "run.manifest.json"
        save_manifest(man, p)
        assert load_manifest(p) == man

    def test_missing_field(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"format": "sgmoe/manifest/v1",
                                 "command": "x"}))
        with pytest.raises(InputError, match="missing field"):
            load_manifest(p)
