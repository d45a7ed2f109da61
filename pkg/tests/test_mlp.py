import math

import numpy as np
import pytest

from synthdetect.mlp import (
    EVAL,
    TRAIN,
    CheckpointFormatError,
    MlpSpec,
    backward,
    forward,
    hidden_dims_for_depth,
    init_params,
    load_checkpoint,
    predict_logits,
    running_keys,
    save_checkpoint,
    trainable_keys,
)
from synthdetect.optim import AdamWState

from oracles import central_diff_dict, rel_close


def tiny_params(input_dim=5, hidden=(4, 3), seed=0, dropout=0.0):
    spec = MlpSpec(input_dim=input_dim, hidden_dims=hidden, dropout_rate=dropout)
    return init_params(spec, seed)


class TestMlpSpec:
    def test_defaults(self):
        spec = MlpSpec()
        assert spec.input_dim == 768
        assert spec.hidden_dims == (512, 256)
        assert spec.dropout_rate == 0.3
        assert spec.bn_epsilon == 1e-5
        assert spec.bn_momentum == 0.1
        assert spec.depth == 3

    def test_depth_counts_affine_layers(self):
        assert MlpSpec(hidden_dims=()).depth == 1
        assert MlpSpec(hidden_dims=(8, 8, 8, 8)).depth == 5

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"input_dim": 0},
            {"hidden_dims": (8, 0)},
            {"dropout_rate": 1.0},
            {"dropout_rate": -0.1},
            {"bn_epsilon": 0.0},
            {"bn_momentum": 0.0},
            {"bn_momentum": 1.0},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValueError):
            MlpSpec(**kwargs)

    def test_hidden_dims_for_depth(self):
        assert hidden_dims_for_depth(3) == (512, 256)
        assert hidden_dims_for_depth(6) == (512, 256, 256, 256, 256)
        assert hidden_dims_for_depth(5, base=(32, 16)) == (32, 16, 16, 16)
        with pytest.raises(ValueError):
            hidden_dims_for_depth(2)

    def test_key_order(self):
        spec = MlpSpec(input_dim=3, hidden_dims=(4, 2))
        assert trainable_keys(spec) == (
            "h0.weight", "h0.bias", "h0.bn_scale", "h0.bn_shift",
            "h1.weight", "h1.bias", "h1.bn_scale", "h1.bn_shift",
            "out.weight", "out.bias",
        )
        assert running_keys(spec) == ("h0.bn_mean", "h0.bn_var", "h1.bn_mean", "h1.bn_var")


class TestInitParams:
    def test_same_seed_identical(self):
        spec = MlpSpec(input_dim=6, hidden_dims=(5,))
        a = init_params(spec, 7)
        b = init_params(spec, 7)
        for key in a.trainable:
            assert (a.trainable[key] == b.trainable[key]).all()
        c = init_params(spec, 8)
        assert (a.trainable["h0.weight"] != c.trainable["h0.weight"]).any()

    def test_xavier_bound(self):
        # fan_in = fan_out = 4: limit is sqrt(6/8) = sqrt(0.75)
        spec = MlpSpec(input_dim=4, hidden_dims=(4, 4))
        params = init_params(spec, 3)
        bound = math.sqrt(0.75)
        w = params.trainable["h0.weight"]
        assert (np.abs(w) <= bound).all()
        w = params.trainable["h1.weight"]
        assert (np.abs(w) <= bound).all()

    def test_bias_and_bn_defaults(self):
        params = tiny_params()
        assert (params.trainable["h0.bias"] == 0).all()
        assert (params.trainable["h0.bn_scale"] == 1).all()
        assert (params.trainable["h0.bn_shift"] == 0).all()
        assert (params.running["h0.bn_mean"] == 0).all()
        assert (params.running["h0.bn_var"] == 1).all()
        assert (params.trainable["out.bias"] == 0).all()

    def test_fresh_bn_eval_is_near_identity(self):
        # running stats (0, 1), scale 1, shift 0: eval BN is x / sqrt(1 + eps)
        spec = MlpSpec(input_dim=3, hidden_dims=(3,), dropout_rate=0.0)
        params = init_params(spec, 0)
        params.trainable["h0.weight"] = np.eye(3)
        params.trainable["out.weight"] = np.ones((3, 1))
        x = np.array([[0.5, 1.25, 2.0], [0.1, 0.2, 0.3]])
        logits, _ = forward(params, x, EVAL)
        expected = (x / math.sqrt(1.0 + spec.bn_epsilon)).sum(axis=1)
        assert np.allclose(logits, expected, rtol=0, atol=1e-12)
        assert np.allclose(logits, x.sum(axis=1), rtol=1e-4)


class TestForward:
    def test_zero_final_layer_gives_zero_logits(self):
        params = tiny_params(seed=2)
        params.trainable["out.weight"] = np.zeros_like(params.trainable["out.weight"])
        params.trainable["out.bias"] = np.zeros_like(params.trainable["out.bias"])
        rng = np.random.default_rng(0)
        logits, _ = forward(params, rng.standard_normal((6, 5)), EVAL)
        assert (logits == 0).all()

    def test_eval_deterministic_and_pure(self):
        params = tiny_params(hidden=(4,), dropout=0.3, seed=1)
        x = np.random.default_rng(5).standard_normal((4, 5))
        before_t = {k: v.copy() for k, v in params.trainable.items()}
        before_r = {k: v.copy() for k, v in params.running.items()}
        a, _ = forward(params, x, EVAL)
        b, _ = forward(params, x, EVAL)
        assert (a == b).all()
        for k, v in before_t.items():
            assert (params.trainable[k] == v).all()
        for k, v in before_r.items():
            assert (params.running[k] == v).all()

    def test_hand_recomputed_single_hidden_layer(self):
        # width-2 hidden layer, hand-set parameters, batch of 3; recompute
        # affine -> batch norm -> ReLU -> affine step by step in plain Python
        spec = MlpSpec(input_dim=2, hidden_dims=(2,), dropout_rate=0.0, bn_epsilon=1e-3)
        params = init_params(spec, 0)
        w0 = [[0.3, -0.2], [0.1, 0.4]]
        b0 = [0.05, -0.1]
        scale = [1.5, 0.8]
        shift = [0.2, -0.3]
        wout = [0.7, -1.1]
        bout = 0.25
        params.trainable["h0.weight"] = np.array(w0)
        params.trainable["h0.bias"] = np.array(b0)
        params.trainable["h0.bn_scale"] = np.array(scale)
        params.trainable["h0.bn_shift"] = np.array(shift)
        params.trainable["out.weight"] = np.array([[wout[0]], [wout[1]]])
        params.trainable["out.bias"] = np.array([bout])
        x = [[1.0, 2.0], [-1.0, 0.5], [0.25, -3.0]]

        logits, _ = forward(params, np.array(x), TRAIN, update_running=False)

        a = [
            [sum(x[n][d] * w0[d][j] for d in range(2)) + b0[j] for j in range(2)]
            for n in range(3)
        ]
        expected = []
        mean = [sum(a[n][j] for n in range(3)) / 3.0 for j in range(2)]
        var = [sum((a[n][j] - mean[j]) ** 2 for n in range(3)) / 3.0 for j in range(2)]
        for n in range(3):
            row = 0.0
            for j in range(2):
                xhat = (a[n][j] - mean[j]) / math.sqrt(var[j] + 1e-3)
                z = scale[j] * xhat + shift[j]
                row += max(z, 0.0) * wout[j]
            expected.append(row + bout)
        assert np.abs(logits - np.array(expected)).max() < 1e-10

    def test_train_updates_running_stats_exactly(self):
        spec = MlpSpec(input_dim=2, hidden_dims=(2,), dropout_rate=0.0, bn_momentum=0.25)
        params = init_params(spec, 4)
        x = np.array([[1.0, -2.0], [0.5, 3.0], [-1.5, 0.25]])
        a = x @ params.trainable["h0.weight"] + params.trainable["h0.bias"]
        want_mean = 0.75 * 0.0 + 0.25 * a.mean(axis=0)
        want_var = 0.75 * 1.0 + 0.25 * a.var(axis=0)
        forward(params, x, TRAIN)
        assert np.allclose(params.running["h0.bn_mean"], want_mean, rtol=0, atol=1e-15)
        assert np.allclose(params.running["h0.bn_var"], want_var, rtol=0, atol=1e-15)

    def test_update_running_flag(self):
        params = tiny_params(hidden=(4,))
        x = np.random.default_rng(1).standard_normal((5, 5))
        before = params.running["h0.bn_mean"].copy()
        forward(params, x, TRAIN, update_running=False)
        assert (params.running["h0.bn_mean"] == before).all()
        forward(params, x, TRAIN)
        assert (params.running["h0.bn_mean"] != before).any()

    def test_train_does_not_touch_trainable(self):
        params = tiny_params(hidden=(4,), dropout=0.5)
        before = {k: v.copy() for k, v in params.trainable.items()}
        x = np.random.default_rng(2).standard_normal((6, 5))
        forward(params, x, TRAIN, rng=np.random.default_rng(0))
        for k, v in before.items():
            assert (params.trainable[k] == v).all()

    def test_batch_of_one_rejected_in_train(self):
        params = tiny_params()
        with pytest.raises(ValueError, match="at least 2"):
            forward(params, np.ones((1, 5)), TRAIN)
        forward(params, np.ones((1, 5)), EVAL)  # fine in eval

    def test_rejects_nonfinite_and_bad_mode(self):
        params = tiny_params()
        bad = np.ones((3, 5))
        bad[1, 2] = np.nan
        with pytest.raises(ValueError):
            forward(params, bad, EVAL)
        with pytest.raises(ValueError, match="mode"):
            forward(params, np.ones((3, 5)), "test")

    def test_dropout_needs_rng(self):
        params = tiny_params(dropout=0.3)
        with pytest.raises(ValueError, match="rng"):
            forward(params, np.ones((4, 5)), TRAIN)

    def test_dropout_mask_replay_is_bitwise(self):
        params = tiny_params(hidden=(6, 4), dropout=0.4, seed=3)
        x = np.random.default_rng(7).standard_normal((8, 5))
        logits, cache = forward(params, x, TRAIN, rng=np.random.default_rng(11),
                                update_running=False)
        again, _ = forward(params, x, TRAIN, dropout_masks=cache.dropout_masks,
                           update_running=False)
        assert (logits == again).all()

    def test_dropout_mask_validation(self):
        params = tiny_params(hidden=(6, 4), dropout=0.4)
        x = np.ones((4, 5))
        with pytest.raises(ValueError, match="masks"):
            forward(params, x, TRAIN, dropout_masks=[np.ones((4, 6), dtype=bool)])
        with pytest.raises(ValueError, match="mask"):
            forward(params, x, TRAIN,
                    dropout_masks=[np.ones((4, 6), dtype=bool), np.ones((9, 9), dtype=bool)])

    def test_dropout_statistics_and_scaling(self):
        # mask keeps a unit with probability 1 - rate; kept units scale by 1/(1-rate)
        rate = 0.4
        params = tiny_params(hidden=(50,), dropout=rate, seed=5)
        x = np.random.default_rng(13).standard_normal((40, 5))
        logits, cache = forward(params, x, TRAIN, rng=np.random.default_rng(17),
                                update_running=False)
        mask = cache.hidden[0].drop_mask
        keep = mask.mean()
        assert abs(keep - (1 - rate)) < 0.05
        assert cache.final_in[~mask].max(initial=0.0) == 0.0
        assert cache.final_in[mask].max() > 0.0


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        params = tiny_params(dropout=0.2)
        x = np.random.default_rng(3).standard_normal((5, 5))
        _, cache = forward(params, x, TRAIN, rng=np.random.default_rng(0),
                           update_running=False)
        grads = backward(params, cache, np.zeros(5))
        for key in trainable_keys(params.spec):
            assert (grads[key] == 0).all()

    def test_degenerate_logistic_gradient(self):
        # no hidden layers, zero weights: logit = 0, sigmoid(0) = 1/2, so the
        # logistic loss on label +1 has d_logit = -1/2 and dW = -x/2 exactly
        spec = MlpSpec(input_dim=4, hidden_dims=(), dropout_rate=0.0)
        params = init_params(spec, 0)
        params.trainable["out.weight"] = np.zeros((4, 1))
        x = np.array([1.0, -2.0, 0.5, 4.0])
        batch = np.stack([x, np.zeros(4)])
        _, cache = forward(params, batch, TRAIN, update_running=False)
        grads = backward(params, cache, np.array([-0.5, -0.5]))
        assert (grads["out.weight"].ravel() == -x / 2.0).all()
        assert grads["out.bias"][0] == -1.0

    def test_requires_train_cache(self):
        params = tiny_params()
        _, cache = forward(params, np.ones((3, 5)), EVAL)
        with pytest.raises(ValueError, match="train-mode"):
            backward(params, cache, np.zeros(3))

    def test_rejects_mismatched_cache(self):
        params = tiny_params(hidden=(4, 3))
        other = tiny_params(hidden=(4,))
        x = np.random.default_rng(0).standard_normal((4, 5))
        _, cache = forward(other, x, TRAIN, update_running=False)
        with pytest.raises(ValueError, match="cache"):
            backward(params, cache, np.zeros(4))

    def _fd_check(self, spec, seed, batch_size, tol=1e-4):
        params = init_params(spec, seed)
        rng = np.random.default_rng(seed + 1000)
        x = rng.standard_normal((batch_size, spec.input_dim))
        coeff = rng.standard_normal(batch_size)
        _, cache0 = forward(params, x, TRAIN, rng=np.random.default_rng(seed + 2000),
                            update_running=False)
        masks = cache0.dropout_masks

        def loss_at(arrays):
            saved = params.trainable
            params.trainable = arrays
            try:
                logits, _ = forward(params, x, TRAIN, dropout_masks=masks,
                                    update_running=False)
            finally:
                params.trainable = saved
            return float(coeff @ logits)

        logits, cache = forward(params, x, TRAIN, dropout_masks=masks,
                                update_running=False)
        grads = backward(params, cache, coeff)
        numeric = central_diff_dict(loss_at, params.trainable, step=1e-5)
        for key in trainable_keys(spec):
            assert rel_close(grads[key], numeric[key], tol), key

    def test_gradients_match_finite_differences(self):
        spec = MlpSpec(input_dim=5, hidden_dims=(4, 3), dropout_rate=0.0)
        self._fd_check(spec, seed=12, batch_size=6)

    def test_gradients_with_dropout(self):
        spec = MlpSpec(input_dim=5, hidden_dims=(4, 3), dropout_rate=0.35)
        self._fd_check(spec, seed=21, batch_size=6)

    @pytest.mark.parametrize("seed,hidden,batch", [
        (101, (), 4),
        (102, (3,), 5),
        (103, (8, 8), 8),
        (104, (6, 4, 2), 7),
        (105, (2,), 2),
    ])
    def test_gradients_random_shapes(self, seed, hidden, batch):
        spec = MlpSpec(input_dim=4, hidden_dims=hidden, dropout_rate=0.0)
        self._fd_check(spec, seed=seed, batch_size=batch)


class TestPredictLogits:
    def test_batching_invariance_bitwise(self):
        params = tiny_params(hidden=(16, 8), seed=9)
        x = np.random.default_rng(23).standard_normal((37, 5))
        whole = predict_logits(params, x)
        for bs in (1, 2, 3, 5, 16, 37, 100):
            assert (predict_logits(params, x, batch_size=bs) == whole).all()

    def test_accepts_feature_bank(self):
        from synthdetect.bank import generate_synthetic

        bank = generate_synthetic(4, 4, dim=5, separation=1.0, seed=0)
        params = tiny_params()
        logits = predict_logits(params, bank)
        assert logits.shape == (8,)
        direct = predict_logits(params, bank.features.astype(np.float64))
        assert (logits == direct).all()

    def test_zero_final_layer(self):
        params = tiny_params(seed=6)
        params.trainable["out.weight"][:] = 0.0
        params.trainable["out.bias"][:] = 0.0
        x = np.random.default_rng(1).standard_normal((9, 5))
        assert (predict_logits(params, x) == 0).all()

    def test_rejects_bad_input(self):
        params = tiny_params()
        with pytest.raises(ValueError):
            predict_logits(params, np.ones((3, 4)))
        with pytest.raises(ValueError, match="batch_size"):
            predict_logits(params, np.ones((3, 5)), batch_size=0)


class TestCheckpoint:
    def trained_like_params(self, seed=31):
        params = tiny_params(hidden=(3, 2), seed=seed)
        x = np.random.default_rng(seed).standard_normal((6, 5))
        forward(params, x, TRAIN)  # move running stats off the init values
        return params

    def test_round_trip_bitwise(self, tmp_path):
        params = self.trained_like_params()
        path = tmp_path / "head.mlpc"
        save_checkpoint(params, path)
        loaded, opt = load_checkpoint(path)
        assert opt is None
        assert loaded.spec == params.spec
        for key in trainable_keys(params.spec):
            assert (loaded.trainable[key] == params.trainable[key]).all()
        for key in running_keys(params.spec):
            assert (loaded.running[key] == params.running[key]).all()

    def test_round_trip_with_optimizer_state(self, tmp_path):
        params = self.trained_like_params(seed=32)
        state = AdamWState.initial(params.trainable)
        rng = np.random.default_rng(0)
        for key in state.m:
            state.m[key] = rng.standard_normal(state.m[key].shape)
            state.v[key] = rng.random(state.v[key].shape)
        state.t = 17
        path = tmp_path / "resume.mlpc"
        save_checkpoint(params, path, opt_state=state)
        _, opt = load_checkpoint(path)
        assert opt is not None
        assert opt.t == 17
        for key in state.m:
            assert (opt.m[key] == state.m[key]).all()
            assert (opt.v[key] == state.v[key]).all()

    def test_save_is_deterministic(self, tmp_path):
        params = self.trained_like_params(seed=33)
        a = tmp_path / "a.mlpc"
        b = tmp_path / "b.mlpc"
        save_checkpoint(params, a)
        save_checkpoint(params, b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mlpc"
        params = self.trained_like_params()
        save_checkpoint(params, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v9.mlpc"
        params = self.trained_like_params()
        save_checkpoint(params, path)
        data = bytearray(path.read_bytes())
        data[4:6] = (9).to_bytes(2, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_truncation_names_offset(self, tmp_path):
        path = tmp_path / "cut.mlpc"
        params = self.trained_like_params()
        save_checkpoint(params, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 5])
        with pytest.raises(CheckpointFormatError, match=f"byte offset {len(data) - 5}"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "fat.mlpc"
        params = self.trained_like_params()
        save_checkpoint(params, path)
        good = path.read_bytes()
        path.write_bytes(good + b"\x00\x00\x00")
        with pytest.raises(CheckpointFormatError, match="3 trailing bytes"):
            load_checkpoint(path)

    def test_nonfinite_rejected(self, tmp_path):
        path = tmp_path / "nan.mlpc"
        params = self.trained_like_params()
        params.trainable["out.bias"][0] = np.nan
        save_checkpoint(params, path)
        with pytest.raises(CheckpointFormatError, match="non-finite"):
            load_checkpoint(path)

    def test_nonpositive_running_var_rejected(self, tmp_path):
        path = tmp_path / "var.mlpc"
        params = self.trained_like_params()
        params.running["h0.bn_var"][0] = 0.0
        save_checkpoint(params, path)
        with pytest.raises(CheckpointFormatError, match="variance"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "absent.mlpc")

    def test_loaded_params_predict_identically(self, tmp_path):
        params = self.trained_like_params(seed=34)
        x = np.random.default_rng(2).standard_normal((12, 5))
        path = tmp_path / "same.mlpc"
        save_checkpoint(params, path)
        loaded, _ = load_checkpoint(path)
        assert (predict_logits(loaded, x) == predict_logits(params, x)).all()
