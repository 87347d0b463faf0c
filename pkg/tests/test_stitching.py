import dataclasses

import numpy as np
import pytest
from scipy import sparse

from koopstitch import stitching
from koopstitch.dynamics import get_system, write_trajectories_csv
from koopstitch.edmd import KoopmanModel, learning_error, predict, save_model
from koopstitch.errors import ValidationError
from koopstitch.lifting import Dictionary, build_dictionary
from koopstitch.spectral import data_grid, decompose, unit_multiplicity
from koopstitch.stitching import (
    classify,
    classify_batch,
    stitch,
    stitched_decompose,
    stitched_lift,
    stitched_predict,
    stitched_unit_fields,
)
from oracles import TOGGLE_SINK_LEFT, TOGGLE_SINK_RIGHT

ONE_D = Dictionary("coordinate", 1)


def scalar(a, label, states):
    return KoopmanModel(np.array([[a]]), ONE_D, label=label,
                        training_states=np.asarray(states, float).reshape(-1, 1))


@pytest.fixture(scope="module")
def stitched(toggle):
    return stitch([toggle.local["left"], toggle.local["right"]])


def test_two_scalar_blocks():
    m = stitch([scalar(0.5, "a", [0, 1]), scalar(0.9, "b", [5, 6])])
    assert np.array_equal(m.K_S.toarray(), [[0.5, 0], [0, 0.9]])
    assert classify(m.classifier, [0.2]) == 0 and classify(m.classifier, [6.0]) == 1


def test_single_model_passthrough(toggle):
    m = stitch([toggle.global_model])
    assert m.K_S.toarray().tobytes() == toggle.global_model.K.tobytes()
    assert classify(m.classifier, [9.0, 9.0]) == 0
    x = np.array([1.0, 2.0])
    assert np.array_equal(stitched_lift(m, x), toggle.dictionary.evaluate(x[None])[:, 0])


def test_duplicate_labels_rejected():
    with pytest.raises(ValidationError):
        stitch([scalar(0.5, "a", [0, 1]), scalar(0.9, "a", [5, 6])])


def test_missing_training_states_rejected():
    m = KoopmanModel(np.array([[0.5]]), ONE_D, label="a")
    with pytest.raises(ValidationError):
        stitch([m, scalar(0.9, "b", [1, 2])])


def test_toggle_stitched_structure(stitched, toggle):
    K_S = stitched.K_S
    assert sparse.issparse(K_S) and K_S.shape == (60, 60)
    assert stitched.block_offsets == (0, 30) and stitched.labels == ["left", "right"]
    dense = K_S.toarray()
    assert np.array_equal(dense[:30, :30], toggle.local["left"].K)
    assert np.array_equal(dense[30:, 30:], toggle.local["right"].K)
    assert not np.any(dense[:30, 30:]) and not np.any(dense[30:, :30])


def test_spectrum_union(stitched, toggle):
    got = np.sort_complex(np.linalg.eigvals(stitched.K_S.toarray()))
    union = np.sort_complex(np.concatenate([np.linalg.eigvals(m.K) for m in stitched.locals]))
    assert np.allclose(got, union, atol=1e-10)
    spec = stitched_decompose(stitched)
    assert np.allclose(np.sort_complex(spec.eigenvalues), union, atol=1e-10)
    assert np.all(spec.residuals(stitched.K_S.toarray()) <= 1e-8 * spec.K_norm)


def test_unit_multiplicity_is_additive(stitched):
    total = sum(unit_multiplicity(decompose(m)) for m in stitched.locals)
    assert unit_multiplicity(stitched_decompose(stitched)) == total == 2


def test_order_invariance(toggle, stitched):
    swapped = stitch([toggle.local["right"], toggle.local["left"]])
    a = np.sort_complex(stitched_decompose(stitched).eigenvalues)
    b = np.sort_complex(stitched_decompose(swapped).eigenvalues)
    assert np.array_equal(a, b)
    assert np.array_equal(swapped.blocks[0], stitched.blocks[1])
    x = np.array([2.5, 0.1])
    assert swapped.labels[classify(swapped.classifier, x)] == stitched.labels[classify(stitched.classifier, x)]


def test_classify_training_snapshot(stitched, toggle):
    snap = toggle.by_label["right"][3].states[7]
    assert classify(stitched.classifier, snap) == 1


def test_classify_right_basin_point(stitched):
    assert stitched.labels[classify(stitched.classifier, [2.5, 0.1])] == "right"


def test_classify_tie_goes_to_lowest_block(caplog):
    m = stitch([scalar(0.5, "a", [0.0]), scalar(0.9, "b", [2.0])])
    labels, boundary = classify_batch(m.classifier, [[1.0], [0.2]])
    assert labels.tolist() == [0, 0] and boundary.tolist() == [True, False]
    assert classify(m.classifier, [1.0]) == 0
    assert "equidistant" in caplog.text


def test_classify_rejects_nonfinite(stitched):
    with pytest.raises(ValidationError):
        classify(stitched.classifier, [np.nan, 1.0])


def test_residual_argmin_classifier(toggle):
    m = stitch([toggle.local["left"], toggle.local["right"]], method="residual_argmin")
    probe = toggle.by_label["right"][0].states[:200]
    assert m.labels[classify(m.classifier, probe)] == "right"


def test_gated_lift(stitched):
    v = stitched_lift(stitched, [2.5, 0.1])
    assert np.all(v[:30] == 0) and np.all(v[30:] > 0) and np.all(v[30:] <= 1)
    w = stitched.K_S @ v
    assert np.all(w[:30] == 0)


def test_stitched_predict_is_padded_local(stitched, toggle):
    x0 = np.array([0.2, 2.2])
    Y, p = stitched_predict(stitched, x0, 20)
    assert stitched.labels[p] == "left"
    assert np.array_equal(Y[:, :30], predict(toggle.local["left"], x0, 20))
    assert not np.any(Y[:, 30:])
    Y0, _ = stitched_predict(stitched, x0, 0)
    assert np.array_equal(Y0[0], stitched_lift(stitched, x0))


def test_stitched_prediction_error_matches_local(stitched, toggle):
    tr = next(t for t in toggle.by_label["left"] if np.allclose(t.states[0], [0.375, 2.625]))
    n = 50
    x0, target = tr.states[0], tr.states[n * 15]
    Y, p = stitched_predict(stitched, x0, n)
    truth = stitched_lift(stitched, target, label=p)
    local = predict(toggle.local["left"], x0, n)[-1]
    e_s = np.linalg.norm(Y[-1] - truth)
    e_l = np.linalg.norm(local - toggle.dictionary.evaluate(target[None])[:, 0])
    assert e_s <= 1.1 * e_l + 1e-15


def test_unit_fields_localize_both_attractors(stitched, toggle):
    fields = stitched_unit_fields(stitched, data_grid(toggle.states))
    assert [p for p, _ in fields] == [0, 1]
    sinks = {0: TOGGLE_SINK_LEFT, 1: TOGGLE_SINK_RIGHT}
    for p, f in fields:
        assert np.linalg.norm(f.peak - sinks[p]) < 0.5


def test_save_load_roundtrip(tmp_path, toggle):
    data = tmp_path / "data.csv"
    write_trajectories_csv(data, toggle.trajs)
    locals_ = [dataclasses.replace(toggle.local[k], provenance={
        "traj_ids": [t.id for t in toggle.by_label[k]], "data": "data.csv"}) for k in ("left", "right")]
    m = stitch(locals_)
    path = tmp_path / "stitched.json"
    stitching.save_stitched(m, path)
    back = stitching.load_stitched(path, get_system("toggle_switch"))
    assert np.array_equal(back.K_S.toarray(), m.K_S.toarray())
    assert back.labels == m.labels and back.locals[0].lag == 15
    q = np.random.default_rng(0).uniform(0, 3, size=(50, 2))
    assert np.array_equal(classify_batch(back.classifier, q)[0], classify_batch(m.classifier, q)[0])


def test_mask_csv(tmp_path, stitched):
    path = tmp_path / "mask.csv"
    stitching.write_mask_csv(path, stitched)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert path.read_text().startswith("row,col,value\n")
    assert len(rows) == stitched.K_S.nnz
    same_block = (rows[:, 0] < 30) == (rows[:, 1] < 30)
    assert np.all(same_block)
