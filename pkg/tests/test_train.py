"""Training loop, metrics logging, and the checkpoint container."""

import os

import numpy as np
import pytest

import densefold.train as train_mod
from densefold import data, model, optim, train
from densefold.data import ArrayDataset, AugmentConfig
from densefold.errors import FormatError, InputError, NumericError
from densefold.model import NetworkSpec
from densefold.optim import SgdState, TrainHyper
from densefold.tensor import Rng
from synth_digits import build_corpus

TINY = NetworkSpec(depth_n=10, growth_k=2, image_size=32)


def fake_clock():
    """Deterministic stand-in for perf_counter: 0, 1, 2, ... seconds."""
    state = {"t": -1.0}

    def tick():
        state["t"] += 1.0
        return state["t"]

    return tick


def corpus_dataset(n=60, seed=0, fold_seed=1):
    raws, labels = build_corpus(n, seed=seed)
    images = np.stack([data.quantize_u8(data.preprocess_image(r)) for r in raws])
    mean, std = data.compute_norm_stats(images)
    return ArrayDataset(images, np.asarray(labels), mean, std, fold_seed)


@pytest.fixture(scope="module")
def small_ds():
    return corpus_dataset(60)


class TestOneHot:
    def test_basic(self):
        out = train.one_hot(np.array([0, 3]), 4)
        assert out.tolist() == [[1, 0, 0, 0], [0, 0, 0, 1]]

    def test_range_check(self):
        with pytest.raises(InputError):
            train.one_hot(np.array([4]), 4)


class TestAssembleBatch:
    def test_standardization_matches_manual(self, small_ds):
        idx = np.array([0, 5, 9])
        x = train.assemble_batch(small_ds, idx)
        manual = small_ds.images[idx].astype(np.float32) / 255.0
        manual = (manual - small_ds.norm_mean.astype(np.float32)[None, :, None, None]) / (
            small_ds.norm_std.astype(np.float32)[None, :, None, None]
        )
        assert np.array_equal(x, manual)

    def test_augment_streams_keyed_by_sample_index(self, small_ds):
        cfg = AugmentConfig()
        a = train.assemble_batch(
            small_ds, np.array([3, 8]), epoch=2, root_rng=Rng(1), augment_cfg=cfg
        )
        b = train.assemble_batch(
            small_ds, np.array([8, 3]), epoch=2, root_rng=Rng(1), augment_cfg=cfg
        )
        # batch order must not change what each sample sees
        assert np.array_equal(a[0], b[1])
        assert np.array_equal(a[1], b[0])

    def test_epoch_changes_augmentation(self, small_ds):
        cfg = AugmentConfig()
        a = train.assemble_batch(small_ds, np.array([3]), epoch=1, root_rng=Rng(1), augment_cfg=cfg)
        b = train.assemble_batch(small_ds, np.array([3]), epoch=2, root_rng=Rng(1), augment_cfg=cfg)
        assert not np.array_equal(a, b)


class TestComputeLoss:
    def test_cross_entropy_kind(self):
        z = np.random.default_rng(0).normal(size=(4, 10))
        y = np.array([1, 2, 3, 4])
        loss, grad = train.compute_loss(z, y, "cross_entropy")
        ref_loss, ref_grad = optim.cross_entropy_loss(z, y)
        assert loss == ref_loss
        assert np.array_equal(grad, ref_grad)

    def test_mse_kind_chains_through_softmax(self):
        from densefold.nn import softmax, softmax_backward

        z = np.random.default_rng(1).normal(size=(3, 10))
        y = np.array([0, 5, 9])
        loss, grad = train.compute_loss(z, y, "mse")
        probs = softmax(z)
        ref_loss, ref_gp = optim.mse_loss(probs, train.one_hot(y, 10, z.dtype))
        assert loss == ref_loss
        assert np.array_equal(grad, softmax_backward(probs, ref_gp))


class TestTrainEpoch:
    def test_null_update_leaves_trainables_bitwise(self, small_ds):
        # lr_at past the drop with factor 0 gives a true zero learning rate
        hyper = TrainHyper(lr_drop_factor=0.0, weight_decay_lambda=0.0)
        assert optim.lr_at(81, hyper) == 0.0
        params = model.build(TINY, Rng(1))
        state = SgdState.for_params(params)
        before = {n: params[n].copy() for n in model.trainable_names(params)}
        train.train_epoch(
            TINY, params, state, hyper, small_ds, np.arange(len(small_ds)),
            epoch=81, root_rng=Rng(1),
        )
        # running statistics are inference statistics and do move; every
        # optimizer-owned tensor must be untouched by the null update
        for n, v in before.items():
            assert np.array_equal(v, params[n]), n

    def test_returns_loss_and_accuracy(self, small_ds):
        hyper = TrainHyper(epochs=1)
        params = model.build(TINY, Rng(2))
        state = SgdState.for_params(params)
        loss, acc = train.train_epoch(
            TINY, params, state, hyper, small_ds, np.arange(len(small_ds)),
            epoch=1, root_rng=Rng(2),
        )
        assert loss > 0.0
        assert 0.0 <= acc <= 1.0

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_nan_abort_names_epoch_batch_lr(self, small_ds):
        hyper = TrainHyper()
        params = model.build(TINY, Rng(3))
        params["stem.weight"][0, 0, 0, 0] = np.inf
        state = SgdState.for_params(params)
        with pytest.raises(NumericError) as exc:
            train.train_epoch(
                TINY, params, state, hyper, small_ds, np.arange(len(small_ds)),
                epoch=1, root_rng=Rng(3),
            )
        msg = str(exc.value)
        assert "epoch 1" in msg and "batch 0" in msg and "lr" in msg


class TestEvaluate:
    def test_empty_index(self, small_ds):
        params = model.build(TINY, Rng(4))
        acc, preds = train.evaluate_split(TINY, params, small_ds, np.array([], dtype=np.int64))
        assert acc == 0.0 and preds.shape == (0,)

    def test_accuracy_matches_predictions(self, small_ds):
        params = model.build(TINY, Rng(4))
        idx = np.arange(20)
        acc, preds = train.evaluate_split(TINY, params, small_ds, idx)
        assert acc == float((preds == small_ds.labels[idx]).mean())

    def test_batched_equals_single_shot(self, small_ds):
        params = model.build(TINY, Rng(5))
        idx = np.arange(30)
        a = train.predict_logits(TINY, params, small_ds, idx, batch_size=7)
        b = train.predict_logits(TINY, params, small_ds, idx, batch_size=30)
        assert np.allclose(a, b, atol=1e-5)


class TestFit:
    def test_single_epoch_run(self, small_ds, tmp_path):
        hyper = TrainHyper(epochs=1)
        metrics = train.fit(
            TINY, hyper, small_ds, tmp_path, root_seed=1, clock=fake_clock()
        )
        assert len(metrics) == 1
        assert metrics[0].epoch == 1
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == train.CSV_HEADER
        assert len(lines) == 2
        # epoch 1 is both the best seen and the final state
        best = (tmp_path / "best.bdnt").read_bytes()
        final = (tmp_path / "final.bdnt").read_bytes()
        assert best == final

    def test_csv_row_format(self, small_ds, tmp_path):
        metrics = train.fit(
            TINY, TrainHyper(epochs=2), small_ds, tmp_path, clock=fake_clock()
        )
        row = (tmp_path / "metrics.csv").read_text().splitlines()[1]
        fields = row.split(",")
        assert fields[0] == "1"
        assert fields[4] == "0.009"
        assert fields[5] == "1.000"  # fake clock ticks one second per call
        assert float(fields[1]) == round(metrics[0].train_loss, 6)

    def test_lr_column_equals_schedule(self, small_ds, tmp_path):
        hyper = TrainHyper(epochs=3)
        metrics = train.fit(TINY, hyper, small_ds, tmp_path, clock=fake_clock())
        for row in metrics:
            assert row.lr == optim.lr_at(row.epoch, hyper)

    def test_fold_rotation(self, small_ds, tmp_path, monkeypatch):
        seen = []
        orig = train_mod.evaluate_split

        def spy(spec, params, dataset, idx, batch_size=64):
            seen.append(np.sort(np.asarray(idx)).tolist())
            return orig(spec, params, dataset, idx, batch_size)

        monkeypatch.setattr(train_mod, "evaluate_split", spy)
        train.fit(TINY, TrainHyper(epochs=4), small_ds, tmp_path, clock=fake_clock())
        fold_ids = data.kfold_assign(len(small_ds), 10, small_ds.fold_seed)
        for epoch, idx in enumerate(seen, start=1):
            expected = np.flatnonzero(fold_ids == (epoch - 1) % 10).tolist()
            assert idx == expected

    def test_best_checkpoint_tracks_max_val(self, small_ds, tmp_path):
        metrics = train.fit(
            TINY, TrainHyper(epochs=4), small_ds, tmp_path, clock=fake_clock()
        )
        _, _, meta = train.load_checkpoint(tmp_path / "best.bdnt")
        assert meta["val_acc"] == max(m.val_acc for m in metrics)

    def test_checkpoint_cadence(self, small_ds, tmp_path):
        train.fit(
            TINY, TrainHyper(epochs=4), small_ds, tmp_path,
            checkpoint_every=2, clock=fake_clock(),
        )
        names = sorted(p.name for p in tmp_path.glob("*.bdnt"))
        assert names == ["best.bdnt", "epoch_002.bdnt", "epoch_004.bdnt", "final.bdnt"]

    def test_deterministic_metrics_and_checkpoints(self, small_ds, tmp_path):
        hyper = TrainHyper(epochs=2)
        cfg = AugmentConfig()
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        train.fit(TINY, hyper, small_ds, out_a, root_seed=1, augment_cfg=cfg, clock=fake_clock())
        train.fit(TINY, hyper, small_ds, out_b, root_seed=1, augment_cfg=cfg, clock=fake_clock())
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
        assert (out_a / "final.bdnt").read_bytes() == (out_b / "final.bdnt").read_bytes()

    def test_seed_changes_trajectory(self, small_ds, tmp_path):
        hyper = TrainHyper(epochs=1)
        a = train.fit(TINY, hyper, small_ds, tmp_path / "a", root_seed=1, clock=fake_clock())
        b = train.fit(TINY, hyper, small_ds, tmp_path / "b", root_seed=2, clock=fake_clock())
        assert a[0].train_loss != b[0].train_loss

    def test_loss_trend_is_downward(self, tmp_path):
        ds = corpus_dataset(150, seed=7)
        spec = NetworkSpec(depth_n=10, growth_k=4, image_size=32)
        metrics = train.fit(
            spec, TrainHyper(epochs=10), ds, tmp_path, root_seed=1, clock=fake_clock()
        )
        losses = [m.train_loss for m in metrics]
        diffs = np.diff(losses)
        assert np.median(diffs) < 0

    def test_params_stay_finite(self, small_ds, tmp_path):
        train.fit(TINY, TrainHyper(epochs=2), small_ds, tmp_path, clock=fake_clock())
        params, velocity, _ = train.load_checkpoint(tmp_path / "final.bdnt")
        for n, v in {**params, **velocity}.items():
            assert np.isfinite(v).all(), n


class TestTensorSerialization:
    def test_round_trip_mixed_dtypes(self):
        tensors = {
            "a.weight": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
            "b.bias": np.random.default_rng(1).normal(size=7),
            "meta.epoch": np.array(5.0),
        }
        back = train.deserialize_tensors(train.serialize_tensors(tensors))
        assert set(back) == set(tensors)
        for n in tensors:
            assert back[n].dtype == tensors[n].dtype
            assert np.array_equal(back[n], tensors[n])

    def test_rank_zero_survives(self):
        back = train.deserialize_tensors(train.serialize_tensors({"s": np.array(2.5)}))
        assert back["s"].shape == ()
        assert back["s"] == 2.5

    def test_single_byte_corruption_rejected_everywhere_it_matters(self):
        blob = bytearray(train.serialize_tensors({"w": np.arange(6.0).reshape(2, 3)}))
        pos = len(blob) // 2
        blob[pos] ^= 0xFF
        with pytest.raises(FormatError):
            train.deserialize_tensors(bytes(blob))

    def test_crc_catches_payload_flip(self):
        blob = bytearray(train.serialize_tensors({"w": np.zeros(16)}))
        blob[-10] ^= 0x01  # inside the float payload, CRC must notice
        with pytest.raises(FormatError):
            train.deserialize_tensors(bytes(blob))

    def test_bad_magic_offset_zero(self):
        blob = bytearray(train.serialize_tensors({"w": np.zeros(2)}))
        blob[0] = ord("X")
        with pytest.raises(FormatError) as exc:
            train.deserialize_tensors(bytes(blob))
        assert exc.value.offset == 0

    def test_truncation_rejected(self):
        blob = train.serialize_tensors({"w": np.zeros(4)})
        with pytest.raises(FormatError):
            train.deserialize_tensors(blob[:-3])

    def test_trailing_garbage_rejected(self):
        blob = train.serialize_tensors({"w": np.zeros(4)})
        with pytest.raises(FormatError):
            train.deserialize_tensors(blob + b"!!")


class TestCheckpointFiles:
    def make_state(self, seed=1):
        params = model.build(TINY, Rng(seed))
        state = SgdState.for_params(params)
        for v in state.velocity.values():
            v += np.float32(0.25)  # non-trivial velocity must survive the trip
        return params, state

    def meta(self, ds):
        return train.checkpoint_meta(TINY, ds, epoch=3, val_acc=0.5)

    def test_round_trip_bitwise(self, small_ds, tmp_path):
        params, state = self.make_state()
        p = tmp_path / "ck.bdnt"
        train.save_checkpoint(p, params, state, self.meta(small_ds))
        got_p, got_v, got_m = train.load_checkpoint(p)
        assert set(got_p) == set(params)
        for n in params:
            assert np.array_equal(got_p[n], params[n]), n
            assert got_p[n].dtype == params[n].dtype
        assert set(got_v) == set(state.velocity)
        for n in state.velocity:
            assert np.array_equal(got_v[n], state.velocity[n]), n
        assert got_m["epoch"] == 3.0
        assert got_m["val_acc"] == 0.5

    def test_name_set_matches_build(self, small_ds, tmp_path):
        params, state = self.make_state()
        p = tmp_path / "ck.bdnt"
        train.save_checkpoint(p, params, state, self.meta(small_ds))
        got_p, _, _ = train.load_checkpoint(p)
        assert set(got_p) == {n for n, _ in model.parameter_shapes(TINY)}

    def test_meta_reconstructs_spec_and_stats(self, small_ds, tmp_path):
        params, state = self.make_state()
        p = tmp_path / "ck.bdnt"
        train.save_checkpoint(p, params, state, self.meta(small_ds))
        _, _, meta = train.load_checkpoint(p)
        assert train.spec_from_meta(meta) == TINY
        mean, std = train.norm_stats_from_meta(meta)
        assert np.array_equal(mean, small_ds.norm_mean)
        assert np.array_equal(std, small_ds.norm_std)

    def test_corrupt_header_fail_closed(self, small_ds, tmp_path):
        params, state = self.make_state()
        p = tmp_path / "ck.bdnt"
        train.save_checkpoint(p, params, state, self.meta(small_ds))
        blob = bytearray(p.read_bytes())
        blob[5] ^= 0xFF  # version/count region
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            train.load_checkpoint(p)

    def test_no_temp_file_left_behind(self, small_ds, tmp_path):
        params, state = self.make_state()
        train.save_checkpoint(tmp_path / "ck.bdnt", params, state, self.meta(small_ds))
        leftovers = [p.name for p in tmp_path.iterdir() if p.name != "ck.bdnt"]
        assert leftovers == []

    def test_save_is_deterministic(self, small_ds, tmp_path):
        params, state = self.make_state()
        a = tmp_path / "a.bdnt"
        b = tmp_path / "b.bdnt"
        train.save_checkpoint(a, params, state, self.meta(small_ds))
        train.save_checkpoint(b, params, state, self.meta(small_ds))
        assert a.read_bytes() == b.read_bytes()
