import json

import numpy as np
import pytest

from skillnetx.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from skillnetx.model import build_model
from skillnetx.trainer import MultitaskTrainer

from .tiny import tiny_experiment


@pytest.fixture
def trained():
    exp = tiny_experiment(steps=12, eval_every=6)
    matrix = exp.skill_matrix()
    store = build_model(exp.model, matrix, 0)
    tr = MultitaskTrainer(store, exp.model, matrix, exp.datasets(), exp.train)
    tr.run()
    return exp, matrix, store, tr.state


def test_round_trip_is_bitwise(trained, tmp_path):
    exp, matrix, store, state = trained
    save_checkpoint(tmp_path, exp.model, store, list(matrix.tasks), state, extra={"note": "x"})
    ck = load_checkpoint(tmp_path)
    assert ck.cfg == exp.model and ck.extra == {"note": "x"}
    assert [s.task_id for s in ck.specs] == matrix.task_ids
    assert all(a == b for a, b in zip(ck.specs, matrix.tasks))
    assert dict(ck.store.owners) == dict(store.owners)
    for name, t in store.items():
        assert np.array_equal(ck.store[name].data, t.data) and ck.store[name].data.dtype == np.float64
    assert ck.state.step == state.step and ck.state.metrics == state.metrics
    assert ck.state.rng_state == state.rng_state and ck.state.cursors == state.cursors
    assert all(np.array_equal(ck.state.m[n], state.m[n]) for n in state.m)


def test_without_train_state(trained, tmp_path):
    exp, matrix, store, _ = trained
    save_checkpoint(tmp_path, exp.model, store, list(matrix.tasks))
    assert load_checkpoint(tmp_path).state is None


def test_corrupt_checkpoints_rejected(trained, tmp_path):
    exp, matrix, store, _ = trained
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path / "nowhere")
    save_checkpoint(tmp_path, exp.model, store, list(matrix.tasks))
    manifest = json.loads((tmp_path / "manifest.json").read_text())

    bumped = dict(manifest, format_version=99)
    (tmp_path / "manifest.json").write_text(json.dumps(bumped))
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path)

    shapes = dict(manifest["shapes"], **{"embed.token": [1, 1]})
    (tmp_path / "manifest.json").write_text(json.dumps(dict(manifest, shapes=shapes)))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path)

    owners = dict(manifest["owners"], ghost="shared")
    (tmp_path / "manifest.json").write_text(json.dumps(dict(manifest, owners=owners)))
    with pytest.raises(CheckpointError, match="lacks"):
        load_checkpoint(tmp_path)
