import json

import numpy as np
import pytest
from PIL import Image

from camid.errors import DataError
from camid.manifest import (FoldPlan, ImageRecord, Manifest,
                            apply_paper_filters, hierarchy_stats,
                            ingest_dataset, make_folds, split_fold)

# Device/image counts of the filtered full-scale dataset, one row per model.
TABLE_ROWS = [
    ("Canon", "Ixus70", 3, 603),
    ("Casio", "EX-Z150", 5, 964),
    ("FujiFilm", "FinePixJ50", 3, 661),
    ("Kodak", "M1063", 5, 2527),
    ("Nikon", "CoolPixS710", 5, 961),
    ("Nikon", "D200", 2, 1697),
    ("Nikon", "D70", 4, 1664),
    ("Olympus", "mju_1050SW", 5, 1064),
    ("Panasonic", "DMC-FZ50", 3, 988),
    ("Pentax", "OptioA40", 4, 760),
    ("Praktica", "DCZ5.9", 5, 1056),
    ("Ricoh", "GX100", 5, 1059),
    ("Rollei", "RCP-7325XS", 3, 625),
    ("Samsung", "L74wide", 3, 720),
    ("Samsung", "NV15", 3, 676),
    ("Sony", "DSC-H50", 2, 630),
    ("Sony", "DSC-T77", 4, 777),
    ("Sony", "DSC-W170", 2, 439),
]


def records_for(brand, model, n_devices, n_images, w=3000, h=2000):
    recs = []
    for i in range(n_images):
        d = i % n_devices
        recs.append(ImageRecord(
            path=f"/data/{brand}_{model}_{d}_{i:05d}.JPG",
            brand=brand, model=model, device_index=d,
            image_id=f"{i:05d}", width=w, height=h))
    return recs


def table_manifest():
    recs = []
    for brand, model, n_d, n_i in TABLE_ROWS:
        recs.extend(records_for(brand, model, n_d, n_i))
    return Manifest(recs, filters_applied=True)


def unfiltered_manifest():
    """Pre-filter state: D70 split into D70 (2 devices) + D70s (2 devices),
    plus single-device models that must be dropped."""
    recs = []
    for brand, model, n_d, n_i in TABLE_ROWS:
        if (brand, model) == ("Nikon", "D70"):
            recs.extend(records_for("Nikon", "D70", 2, n_i // 2))
            recs.extend(records_for("Nikon", "D70s", 2, n_i - n_i // 2))
        else:
            recs.extend(records_for(brand, model, n_d, n_i))
    for j, (brand, model) in enumerate([
            ("Agfa", "DC-504"), ("Agfa", "DC-733s"), ("Agfa", "DC-830i"),
            ("Agfa", "Sensor505-x"), ("Agfa", "Sensor530s"),
            ("Canon", "Ixus55"), ("Canon", "PowerShotA640"),
            ("Nikon", "D70s_single")]):
        recs.extend(records_for(brand, model, 1, 20 + j))
    return Manifest(recs)


# -- ingest ----------------------------------------------------------------------


def make_png(path, w=130, h=140):
    arr = np.zeros((h, w, 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def test_ingest_pattern_capture(tmp_path):
    make_png(tmp_path / "Kodak_M1063_3_1021.png")
    m, report = ingest_dataset(tmp_path)
    assert len(m) == 1 and report.total == 0
    r = m.records[0]
    assert (r.brand, r.model, r.device_index, r.image_id) \
        == ("Kodak", "M1063", 3, "1021")


def test_ingest_multiword_model(tmp_path):
    make_png(tmp_path / "Olympus_mju_1050SW_2_123.png")
    m, _ = ingest_dataset(tmp_path)
    r = m.records[0]
    assert (r.brand, r.model, r.device_index) == ("Olympus", "mju_1050SW", 2)


def test_ingest_empty_directory(tmp_path):
    m, report = ingest_dataset(tmp_path)
    assert len(m) == 0 and report.total == 0


def test_ingest_skips_and_counts(tmp_path):
    for i in range(10):
        make_png(tmp_path / f"Kodak_M1063_0_{i:04d}.png")
    (tmp_path / "Kodak_M1063_0_9998.png").write_bytes(b"not a png")
    (tmp_path / "Kodak_M1063_0_9999.png").write_bytes(b"\x89PNG\r\n\x1a\nbroken")
    m, report = ingest_dataset(tmp_path)
    assert len(m) == 10
    assert len(report.unreadable) == 2


def test_ingest_rejects_small_images(tmp_path):
    make_png(tmp_path / "Kodak_M1063_0_0001.png", w=100, h=300)
    make_png(tmp_path / "Kodak_M1063_0_0002.png", w=300, h=127)
    make_png(tmp_path / "Kodak_M1063_0_0003.png", w=128, h=128)
    m, report = ingest_dataset(tmp_path)
    assert len(m) == 1
    assert len(report.too_small) == 2


def test_ingest_missing_root(tmp_path):
    with pytest.raises(DataError):
        ingest_dataset(tmp_path / "nope")


def test_ingest_unmatched_names(tmp_path):
    make_png(tmp_path / "holiday-photo.png")
    m, report = ingest_dataset(tmp_path)
    assert len(m) == 0 and len(report.unmatched) == 1


# -- filters ---------------------------------------------------------------------


def test_filters_full_fixture_counts():
    filtered = apply_paper_filters(unfiltered_manifest())
    stats = hierarchy_stats(filtered)
    assert stats["totals"]["n_models"] == 18
    assert stats["totals"]["n_devices"] == 66
    assert stats["totals"]["n_brands"] == 13


def test_filters_nikon_merge_counts():
    recs = records_for("Nikon", "D70", 2, 40) \
        + records_for("Nikon", "D70s", 2, 30)
    out = apply_paper_filters(Manifest(recs))
    assert out.models("Nikon") == ["D70"]
    assert out.devices("Nikon", "D70") == [0, 1, 2, 3]
    assert len(out) == 70


def test_filters_drop_single_device_models():
    m = Manifest(records_for("Canon", "Ixus55", 1, 30))
    out = apply_paper_filters(m)
    assert len(out) == 0


def test_filters_idempotent():
    once = apply_paper_filters(unfiltered_manifest())
    twice = apply_paper_filters(once)
    assert once.to_dict() == twice.to_dict()


# -- stats -----------------------------------------------------------------------


def test_hierarchy_stats_table_values():
    stats = hierarchy_stats(table_manifest())
    rows = {(r["brand"], r["model"]): r for r in stats["models"]}
    assert rows[("Kodak", "M1063")]["n_devices"] == 5
    assert rows[("Kodak", "M1063")]["n_images"] == 2527
    assert rows[("Sony", "DSC-W170")]["n_devices"] == 2
    assert rows[("Sony", "DSC-W170")]["n_images"] == 439


def test_hierarchy_stats_empty():
    stats = hierarchy_stats(Manifest([]))
    assert stats["totals"] == {"n_brands": 0, "n_models": 0,
                               "n_devices": 0, "n_images": 0}


def test_hierarchy_counts_match_records():
    m = table_manifest()
    counts = m.hierarchy_counts()
    for brand in m.brands():
        for model in m.models(brand):
            for d in m.devices(brand, model):
                assert counts[brand][model][d] == len(m.images(brand, model, d))


# -- folds -----------------------------------------------------------------------


def test_fold_rotation_sequence():
    m = Manifest(records_for("Kodak", "M1063", 3, 30))
    plan = make_folds(m, 5, val_fraction=0.2, seed=1)
    held = [plan.held_out(f)[0][2] for f in range(5)]
    assert held == [0, 1, 2, 0, 1]


def test_fold_holds_out_one_device_per_model():
    m = table_manifest()
    plan = make_folds(m, 5, seed=0)
    for f in range(5):
        held = plan.held_out(f)
        assert len(held) == 18
        assert len({(b, mo) for b, mo, _ in held}) == 18


def test_fold_plan_deterministic():
    m = table_manifest()
    a = make_folds(m, 5, seed=3).to_dict()
    b = make_folds(m, 5, seed=3).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_fold_plan_invariant_under_record_order():
    recs = records_for("Sony", "DSC-H50", 2, 20) \
        + records_for("Canon", "Ixus70", 3, 21)
    a = make_folds(Manifest(recs), 4, seed=0)
    b = make_folds(Manifest(list(reversed(recs))), 4, seed=0)
    assert a.to_dict() == b.to_dict()


def test_fold_requires_two_devices():
    m = Manifest(records_for("Canon", "Ixus55", 1, 10))
    with pytest.raises(DataError, match="Ixus55"):
        make_folds(m, 5)


def test_split_fold_partitions_devices():
    m = table_manifest()
    plan = make_folds(m, 5, val_fraction=0.15, seed=0)
    train, val, test = split_fold(m, plan, 2)
    assert len(train) + len(val) + len(test) == len(m)
    test_devices = {(r.brand, r.model, r.device_index) for r in test}
    trainval_devices = {(r.brand, r.model, r.device_index)
                        for r in train + val}
    assert test_devices == set(plan.held_out(2))
    assert not (test_devices & trainval_devices)
    # stratified validation: every model keeps roughly val_fraction aside
    for brand, model, *_ in TABLE_ROWS:
        n_val = sum(1 for r in val if (r.brand, r.model) == (brand, model))
        n_pool = sum(1 for r in train + val
                     if (r.brand, r.model) == (brand, model))
        assert n_val == int(round(0.15 * n_pool))


def test_split_fold_deterministic():
    m = table_manifest()
    plan = make_folds(m, 5, seed=9)
    a = split_fold(m, plan, 0)
    b = split_fold(m, plan, 0)
    assert [r.key for part in a for r in part] \
        == [r.key for part in b for r in part]


def test_fold_plan_json_roundtrip(tmp_path):
    m = table_manifest()
    plan = make_folds(m, 5, seed=4)
    plan.save(tmp_path / "folds.json")
    again = FoldPlan.load(tmp_path / "folds.json")
    assert again.to_dict() == plan.to_dict()


def test_manifest_json_roundtrip(tmp_path):
    m = table_manifest()
    m.save(tmp_path / "manifest.json")
    again = Manifest.load(tmp_path / "manifest.json")
    assert again.to_dict() == m.to_dict()
