import io

import numpy as np
import pytest

from outfitnet import autodiff as ad
from outfitnet.checkpoint import load_checkpoint, save_checkpoint
from outfitnet.comparison import emb_l2_from_matrices, mask_l1
from outfitnet.config import TrainConfig
from outfitnet.data import (GeneratorConfig, generate, mean_images, pad_outfit,
                            sample_negative)
from outfitnet.errors import ConfigError, DivergenceError, FormatError
from outfitnet.model import Model
from outfitnet.predictor import total_loss_tensor
from outfitnet.training import SgdMomentum, train, validation_probabilities
from outfitnet.vse import Vocabulary


@pytest.fixture(scope="module")
def tiny_ds():
    return generate(GeneratorConfig(n_outfits={"train": 30, "val": 8, "test": 8}, seed=11))


def tiny_cfg(**over):
    base = dict(epochs=2, batch=8, seed=5, stage_channels=(3, 4, 5, 6),
                hidden_dim=8, joint_dim=6)
    base.update(over)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(tiny_ds):
    return train(tiny_ds, tiny_cfg(), log_stream=None)


class TestSgd:
    def test_velocity_shapes_match(self, tiny_ds):
        model = Model.build(tiny_cfg(), Vocabulary(tiny_ds["train"].all_tokens()),
                            mean_images(tiny_ds["train"]))
        opt = SgdMomentum(params=model.named_parameters(), momentum=0.9, clip_norm=5.0)
        for name, t in model.named_parameters():
            assert opt.velocity[name].shape == t.data.shape

    def test_zero_lr_leaves_parameters(self, tiny_ds):
        cfg = tiny_cfg(lr0=0.0)
        before = Model.build(cfg, Vocabulary(tiny_ds["train"].all_tokens()),
                             mean_images(tiny_ds["train"]))
        snapshot = {n: t.data.copy() for n, t in before.named_parameters()}
        ckpt = train(tiny_ds, cfg, log_stream=None)
        for name, arr in snapshot.items():
            # checkpoint stores f32; compare after the same quantization
            assert np.array_equal(ckpt.params[name], arr.astype("<f4").astype(np.float64))

    def test_clipping_caps_global_norm(self):
        t = ad.parameter(np.zeros(4))
        t.grad = np.full(4, 100.0)
        opt = SgdMomentum(params=[("p", t)], momentum=0.0, clip_norm=5.0)
        opt.step(lr=1.0)
        assert np.linalg.norm(t.data) == pytest.approx(5.0, rel=1e-12)

    def test_single_step_decreases_loss(self, tiny_ds):
        """Line-search property: some lr in {1e-2, 1e-3, 1e-4} improves a
        single example's loss after one step."""
        manifest = tiny_ds["train"]
        means = mean_images(manifest)
        decreased = []
        for lr in (1e-2, 1e-3, 1e-4):
            cfg = tiny_cfg()
            model = Model.build(cfg, Vocabulary(manifest.all_tokens()), means)
            rng = np.random.default_rng(7)
            pos = manifest.outfits[0]
            neg = sample_negative(pos, manifest, rng)
            batch = [pad_outfit(pos, means), pad_outfit(neg, means)]
            labels = np.array([1.0, 0.0])

            def loss():
                res = model.forward_batch(batch, train=True)
                clf = ad.tmean(ad.bce_with_logits(res.scores, labels))
                emb = emb_l2_from_matrices(res.occurrence_features(), n_outfits=2)
                mask = mask_l1(model.masks)
                return total_loss_tensor(clf, emb, mask, None, cfg.weights)

            opt = SgdMomentum(params=model.named_parameters(), momentum=0.0,
                              clip_norm=5.0)
            first = loss()
            opt.zero_grad()
            ad.backward(first)
            opt.step(lr)
            with ad.no_grad():
                second = loss()
            decreased.append(second.item() < first.item())
        assert any(decreased)


class TestTrain:
    def test_requires_train_and_val(self, tiny_ds):
        with pytest.raises(ConfigError):
            train({"train": tiny_ds["train"]}, tiny_cfg())

    def test_deterministic_checkpoints(self, tiny_ds, trained):
        again = train(tiny_ds, tiny_cfg(), log_stream=None)
        assert trained.best_val_auc == again.best_val_auc
        for name, arr in trained.params.items():
            assert np.array_equal(arr, again.params[name])

    def test_log_stream_records_epochs(self, tiny_ds):
        stream = io.StringIO()
        train(tiny_ds, tiny_cfg(epochs=2), log_stream=stream)
        lines = [l for l in stream.getvalue().splitlines() if l.strip()]
        assert len(lines) == 2
        import json
        rec = json.loads(lines[0])
        assert {"epoch", "lr", "val_auc", "loss_total"} <= set(rec)

    def test_lr_decay_schedule(self, tiny_ds):
        stream = io.StringIO()
        train(tiny_ds, tiny_cfg(epochs=12, decay_every=10, decay=0.2), log_stream=stream)
        import json
        recs = [json.loads(l) for l in stream.getvalue().splitlines()]
        assert recs[0]["lr"] == pytest.approx(1e-2)
        assert recs[9]["lr"] == pytest.approx(1e-2)
        assert recs[10]["lr"] == pytest.approx(2e-3)

    def test_divergence_detection(self, tiny_ds):
        # an absurd lr without clipping drives the MLP past float range:
        # inf - inf = NaN in the loss, which must abort with a named culprit
        cfg = tiny_cfg(lr0=1e155, clip_norm=0.0, epochs=2)
        with np.errstate(all="ignore"), pytest.raises(DivergenceError) as err:
            train(tiny_ds, cfg, log_stream=None)
        assert err.value.parameter is not None

    def test_ablation_flags_respected(self, tiny_ds):
        ck = train(tiny_ds, tiny_cfg(use_vse=False, use_projection=False),
                   log_stream=None)
        # disabled projection: masks never move from their all-ones init
        for k in range(1, 5):
            assert np.array_equal(ck.params[f"masks.layer{k}"],
                                  np.ones_like(ck.params[f"masks.layer{k}"]))

    def test_layer_restriction_changes_mlp_width(self, tiny_ds):
        ck = train(tiny_ds, tiny_cfg(layers_enabled=(4,)), log_stream=None)
        assert ck.params["mlp.w1"].shape == (8, 10)
        assert ck.config.layers == (4,)


class TestCheckpoint:
    def test_round_trip_params_close(self, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        back = load_checkpoint(path)
        for name, arr in trained.params.items():
            assert np.abs(back.params[name] - arr).max() < 1e-6
        assert back.vocab_tokens == trained.vocab_tokens
        assert back.condition_order == trained.condition_order
        assert back.best_epoch == trained.best_epoch

    def test_save_load_save_byte_identical(self, trained, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(trained, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_recorded_auc_reproduced_exactly(self, tiny_ds, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        model = load_checkpoint(path).to_model()
        from outfitnet.training import _rng, _sample_negatives
        val_negatives = _sample_negatives(tiny_ds["val"].outfits, tiny_ds["val"],
                                          _rng(trained.config.seed, 12), 1)
        probs, labels = validation_probabilities(model, tiny_ds["val"], val_negatives)
        from outfitnet.evaluation import auc
        assert abs(auc(list(probs), labels) - trained.best_val_auc) < 1e-9

    def test_bad_magic(self, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert err.value.offset == 0

    def test_truncation_detected(self, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 50])
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert err.value.offset is not None

    def test_corrupt_offset_detected(self, trained, tmp_path):
        import json, struct
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        raw = path.read_bytes()
        (head_len,) = struct.unpack("<Q", raw[4:12])
        header = json.loads(raw[12:12 + head_len])
        header["arrays"][0]["offset"] = 10 ** 9
        head = json.dumps(header).encode()
        path.write_bytes(raw[:4] + struct.pack("<Q", len(head)) + head + raw[12 + head_len:])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_to_model_round_trip_scores(self, tiny_ds, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained, path)
        m1 = trained.to_model()
        m2 = load_checkpoint(path).to_model()
        means = m1.mean_images
        padded = [pad_outfit(o, means) for o in tiny_ds["test"].outfits[:4]]
        assert np.array_equal(m1.probabilities(padded), m2.probabilities(padded))
