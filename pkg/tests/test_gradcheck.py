import numpy as np

from omnimoe.gradcheck import MICRO_VARIANTS, check_model, micro_batch, micro_config, param_classes, summarize
from omnimoe.encoder import FmriEncoder


def test_micro_batch_mixes_subjects_and_stimuli():
    cfg = micro_config(batch_size=4)
    data = micro_batch(cfg)
    assert sorted(set(data.subjects)) == [1, 2]
    assert len(set(data.stimuli)) == 4


def test_omni_micro_model_covers_every_parameter_class():
    res = check_model(micro_config())
    assert res.passed, res.max_rel_err
    assert {"experts", "subject_params", "attention", "heads", "temperature"} <= param_classes(res.reports)
    assert set(res.reports) - {"temperature"} == set(FmriEncoder(micro_config()).named_parameters())


def test_summarize_rows():
    res = {"omni": check_model(micro_config())}
    rows = summarize(res)
    assert len(rows) == len(res["omni"].reports) and all(r[0] == "omni" for r in rows)
    assert np.isclose(max(r[2] for r in rows), res["omni"].max_rel_err)


def test_variant_table():
    assert set(MICRO_VARIANTS) == {"omni", "omni-shared", "dense", "sparse", "mlp"}
