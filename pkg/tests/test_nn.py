import struct

import numpy as np
import pytest

from mvtryon import nn, numerics as num
from mvtryon.errors import ContractError, DimensionError, FormatError
from mvtryon.nn import LinearLayer, ParamSpec, ParamStore, attention, init_params, linear
from mvtryon.numerics import Tensor

from conftest import check_grads, projection_loss
from oracles import matmul_loops, softmax_ref


def small_spec():
    return [ParamSpec("lin.w", (4, 3)), ParamSpec("lin.b", (4,), init="zeros"),
            ParamSpec("ln.g", (4,), init="ones")]


class TestInitParams:
    def test_same_seed_identical(self):
        s1 = init_params(small_spec(), 42)
        s2 = init_params(small_spec(), 42)
        for (n1, t1), (n2, t2) in zip(s1.items(), s2.items()):
            assert n1 == n2 and np.array_equal(t1.data, t2.data)

    def test_biases_zero_gains_one(self):
        store = init_params(small_spec(), 0)
        assert np.array_equal(store["lin.b"].data, np.zeros(4))
        assert np.array_equal(store["ln.g"].data, np.ones(4))

    def test_uniform_mean_within_three_sigma(self):
        # uniform(-b, b) with b = 1/sqrt(256): sigma_mean = b / sqrt(3 * 256^2)
        store = init_params([ParamSpec("w", (256, 256))], 5)
        w = store["w"].data
        bound = 1.0 / 16.0
        sigma_mean = bound / np.sqrt(3.0 * w.size)
        assert abs(w.mean()) <= 3.0 * sigma_mean
        assert w.min() >= -bound and w.max() <= bound

    def test_duplicate_names_rejected(self):
        with pytest.raises(ContractError):
            init_params([ParamSpec("w", (2, 2)), ParamSpec("w", (2, 2))], 0)

    def test_all_params_require_grad(self):
        store = init_params(small_spec(), 3)
        assert all(t.requires_grad for _, t in store.items())


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.normal(size=(5, 4))
        layer = LinearLayer(Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(linear(layer, Tensor(x)).data, x)

    def test_zero_input_broadcasts_bias(self, rng):
        b = rng.normal(size=3)
        layer = LinearLayer(Tensor(rng.normal(size=(3, 4))), Tensor(b))
        out = linear(layer, Tensor(np.zeros((2, 4))))
        assert np.allclose(out.data, np.tile(b, (2, 1)), atol=1e-15)

    def test_against_matmul_plus_add(self, rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(5, 4))
        b = rng.normal(size=5)
        out = linear(LinearLayer(Tensor(w), Tensor(b)), Tensor(x))
        assert np.max(np.abs(out.data - (matmul_loops(x, w.T) + b))) < 1e-12

    def test_dim_mismatch(self, rng):
        layer = LinearLayer(Tensor(rng.normal(size=(3, 4))))
        with pytest.raises(DimensionError):
            linear(layer, Tensor(np.zeros((2, 5))))


class TestAttention:
    def test_single_key_returns_v_row(self, rng):
        q = Tensor(rng.normal(size=(4, 3)))
        k = Tensor(rng.normal(size=(1, 3)))
        v = Tensor(rng.normal(size=(1, 5)))
        out = attention(q, k, v)
        assert np.max(np.abs(out.data - np.tile(v.data, (4, 1)))) < 1e-12

    def test_uniform_keys_average_values(self, rng):
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        v = Tensor(rng.normal(size=(5, 2)))
        out = attention(q, k, v)
        assert np.max(np.abs(out.data - v.data.mean(axis=0))) < 1e-12

    def test_orthonormal_scaled_queries_pick_matching_rows(self, rng):
        base = np.eye(4) * 50.0
        v = rng.normal(size=(4, 3))
        out = attention(Tensor(base), Tensor(base), Tensor(v))
        scores = matmul_loops(base, base.T) / 2.0
        expected = matmul_loops(softmax_ref(scores, 1), v)
        assert np.max(np.abs(out.data - expected)) < 1e-12
        assert np.max(np.abs(out.data - v)) < 1e-6  # near-one-hot at scale 50

    def test_weight_rows_sum_to_one(self, rng):
        w = nn.attention_weights(Tensor(rng.normal(size=(3, 4))),
                                 Tensor(rng.normal(size=(6, 4))))
        assert np.max(np.abs(w.data.sum(axis=1) - 1.0)) < 1e-12

    def test_kv_permutation_equivariance(self, rng):
        q = Tensor(rng.normal(size=(3, 4)))
        k = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 5))
        perm = rng.permutation(6)
        out1 = attention(q, Tensor(k), Tensor(v))
        out2 = attention(q, Tensor(k[perm]), Tensor(v[perm]))
        assert np.max(np.abs(out1.data - out2.data)) < 1e-12

    def test_gradients(self, rng):
        q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        check_grads(lambda: projection_loss(attention(q, k, v), 3), [q, k, v])


class TestCheckpoint:
    def _roundtrip(self, tmp_path, store):
        path = tmp_path / "params.mvtc"
        nn.save_checkpoint(store, path)
        return path, nn.load_checkpoint(path)

    def test_roundtrip_bitwise(self, tmp_path, rng):
        store = init_params(small_spec(), 11)
        store["lin.w"].data[:] = rng.normal(size=(4, 3))  # arbitrary exact doubles
        _, loaded = self._roundtrip(tmp_path, store)
        assert loaded.rng_seed == store.rng_seed
        assert loaded.names() == store.names()
        for name in store.names():
            assert np.array_equal(loaded[name].data, store[name].data)
            assert loaded[name].data.dtype == np.float64

    def test_corrupted_magic(self, tmp_path):
        store = init_params(small_spec(), 1)
        path = tmp_path / "p.mvtc"
        nn.save_checkpoint(store, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            nn.load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        store = init_params(small_spec(), 1)
        path = tmp_path / "p.mvtc"
        nn.save_checkpoint(store, path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError):
            nn.load_checkpoint(path)

    def test_record_count_matches_param_count(self, tmp_path):
        store = init_params(small_spec(), 1)
        path = tmp_path / "p.mvtc"
        nn.save_checkpoint(store, path)
        # independent record walk over the file layout
        raw = path.read_bytes()
        assert raw[:4] == b"MVTC"
        _, _, count = struct.unpack("<IQI", raw[4:20])
        offset = 20
        names = []
        while offset < len(raw):
            (name_len,) = struct.unpack("<I", raw[offset:offset + 4])
            offset += 4
            names.append(raw[offset:offset + name_len].decode())
            offset += name_len
            (rank,) = struct.unpack("<I", raw[offset:offset + 4])
            offset += 4
            dims = struct.unpack(f"<{rank}I", raw[offset:offset + 4 * rank])
            offset += 4 * rank + 8 * int(np.prod(dims))
        assert count == len(store) == len(names)
        assert names == store.names()


class TestParamStore:
    def test_unknown_name(self):
        store = ParamStore()
        with pytest.raises(ContractError):
            store["nope"]

    def test_add_enforces_requires_grad(self):
        store = ParamStore()
        t = Tensor(np.zeros((2,)))
        store.add("x", t)
        assert t.requires_grad
