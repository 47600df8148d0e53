import json

import numpy as np
import pytest

from app.models.errors import ModelFormatError
from app.services.generative_model import (
    GenerativeModel,
    ObservationModel,
    PreferenceModel,
    TransitionModel,
)
from app.services.model_store import load_model, save_model


@pytest.fixture
def toy_model(rng, two_policies):
    A = ObservationModel((rng.uniform(0.5, 2.0, size=(2, 4)), rng.uniform(0.5, 2.0, size=(3, 4))))
    B = TransitionModel(rng.uniform(0.5, 2.0, size=(2, 4, 4)))
    return GenerativeModel(A=A, B=B, policies=two_policies)


def _load_toy(path, **kwargs):
    return load_model(path, expected_bins=(2, 3), expected_states=4, expected_actions=2, **kwargs)


class TestModelStore:

    def test_save_then_load(self, tmp_path, toy_model):
        path = save_model(toy_model, tmp_path / "model.npz")
        loaded = _load_toy(path)
        for a, b in zip(toy_model.A.counts, loaded.A.counts):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(toy_model.B.counts, loaded.B.counts)
        assert [p.weights for p in loaded.policies] == [p.weights for p in toy_model.policies]
        assert [p.label for p in loaded.policies] == ["balanced", "heavy-biased"]

    def test_preferences_not_persisted(self, tmp_path, toy_model):
        path = save_model(toy_model, tmp_path / "model.npz")
        C = PreferenceModel(mode="protective")
        assert _load_toy(path, preferences=C).C is C

    def test_default_model(self, tmp_path):
        model = GenerativeModel.initial()
        loaded = load_model(save_model(model, tmp_path / "nested" / "initial.npz"))
        np.testing.assert_allclose(loaded.B.normalized, model.B.normalized)
        assert loaded.A.bins == (3, 3, 3, 2)

    def test_bin_mismatch(self, tmp_path, toy_model):
        path = save_model(toy_model, tmp_path / "model.npz")
        with pytest.raises(ModelFormatError):
            load_model(path, expected_bins=(3, 3), expected_states=4, expected_actions=2)

    def test_dimension_mismatch(self, tmp_path, toy_model):
        path = save_model(toy_model, tmp_path / "model.npz")
        with pytest.raises(ModelFormatError):
            load_model(path, expected_bins=(2, 3), expected_states=243, expected_actions=2)
        with pytest.raises(ModelFormatError):
            load_model(path, expected_bins=(2, 3), expected_states=4, expected_actions=20)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFormatError):
            _load_toy(tmp_path / "absent.npz")

    def test_not_a_model(self, tmp_path):
        path = tmp_path / "garbage.npz"
        path.write_bytes(b"definitely not a zip archive")
        with pytest.raises(ModelFormatError):
            _load_toy(path)

    def test_no_temp_files_left(self, tmp_path, toy_model):
        save_model(toy_model, tmp_path / "model.npz")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["model.npz"]

    def test_missing_policy_labels(self, tmp_path, toy_model):
        path = save_model(toy_model, tmp_path / "model.npz")
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        header = json.loads(str(arrays.pop("header")))
        del header["policy_labels"]
        broken = tmp_path / "no_labels.npz"
        np.savez(broken, header=np.array(json.dumps(header)), **arrays)
        with pytest.raises(ModelFormatError):
            _load_toy(broken)
