"""Composed model: end-to-end gradients, ablation paths, determinism."""

import numpy as np

from sipl import autodiff as ad
from sipl.config import ExperimentConfig
from sipl.model import build_model
from sipl.train import phantom_dataset


def make_cfg(**overrides):
    cfg = ExperimentConfig()
    defaults = {
        "data.extents": "8,8,8",
        "data.num_classes": "2",
        "data.train_count": "1",
        "data.val_count": "1",
        "backbone.depth": "3",
        "backbone.base_channels": "4",
        "backbone.d_i": "16",
        "backbone.d": "8",
        "backbone.d_q": "8",
        "smg.num_queries": "6",
        "smg.num_heads": "2",
    }
    defaults.update({k: str(v) for k, v in overrides.items()})
    for key, raw in defaults.items():
        cfg.apply(key, raw)
    return cfg.validate()


def test_build_model_deterministic():
    cfg = make_cfg()
    a = build_model(cfg)
    b = build_model(cfg)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.tensor.data, pb.tensor.data)


def test_forward_shapes_and_mask_normalization():
    cfg = make_cfg()
    model = build_model(cfg)
    sample = phantom_dataset(cfg, "train", 1)[0]
    out = model.forward(sample.intensities, epoch=0)
    assert out.y_hat.shape == (8, 8, 8, 2)
    assert out.mask_full.shape == (8, 8, 8, 3)
    # trilinear upsampling preserves the per-voxel normalization of the mask
    sums = out.mask_full.data.sum(axis=-1)
    assert np.abs(sums - 1.0).max() < 1e-9
    assert ((out.y_hat.data > 0) & (out.y_hat.data < 1)).all()


def test_loss_report_composition_and_layer_count():
    cfg = make_cfg()
    model = build_model(cfg)
    sample = phantom_dataset(cfg, "train", 1)[0]
    total, report = model.compute_loss(sample.intensities, sample.labels, epoch=2)
    assert len(report.aux_per_layer) == 6
    acc = 0.0
    for a in report.aux_per_layer:
        acc += a
    assert report.total == report.seg + cfg.loss.alpha * acc
    assert abs(total.item() - report.total) < 1e-9


def test_every_parameter_receives_gradient_from_total_loss():
    cfg = make_cfg()
    model = build_model(cfg)
    sample = phantom_dataset(cfg, "train", 1)[0]
    total, _ = model.compute_loss(sample.intensities, sample.labels, epoch=2)
    total.backward()
    for name, p in model.named_parameters():
        assert p.tensor.grad is not None, name
        assert np.isfinite(p.tensor.grad).all(), name


def test_smg_disabled_uses_uniform_masks_and_zero_aux():
    cfg = make_cfg(**{"smg.enabled": "false"})
    model = build_model(cfg)
    assert model.decoder is None
    sample = phantom_dataset(cfg, "train", 1)[0]
    out = model.forward(sample.intensities)
    assert np.allclose(out.mask_full.data, 1.0 / 3.0, atol=1e-15)
    total, report = model.compute_loss(sample.intensities, sample.labels)
    assert report.aux_per_layer == [0.0] * 6
    assert report.total == report.seg
    total.backward()
    for name, p in model.named_parameters():
        if name.startswith("backbone.tap_"):
            continue  # scale taps feed only the (disabled) decoder
        assert p.tensor.grad is not None, name


def test_ipl_disabled_uses_fixed_prototype_table():
    cfg = make_cfg(**{"ipl.enabled": "false"})
    model = build_model(cfg)
    assert model.prototype_table is not None and model.common is None
    sample = phantom_dataset(cfg, "train", 1)[0]
    out = model.forward(sample.intensities)
    assert out.fused is model.prototype_table.tensor
    total, report = model.compute_loss(sample.intensities, sample.labels)
    assert len(report.aux_per_layer) == 6  # decoder still trains through aux
    total.backward()
    assert model.prototype_table.tensor.grad is not None


def test_fused_prototypes_differ_across_inputs():
    cfg = make_cfg(**{"data.intensity_jitter": "0.15"})
    model = build_model(cfg)
    samples = phantom_dataset(cfg, "train", 2)
    f0 = model.forward(samples[0].intensities).fused.data
    f1 = model.forward(samples[1].intensities).fused.data
    assert not np.allclose(f0, f1)


def test_predict_labels_range():
    cfg = make_cfg()
    model = build_model(cfg)
    sample = phantom_dataset(cfg, "train", 1)[0]
    labels = model.predict_labels(sample.intensities)
    assert labels.shape == (8, 8, 8)
    assert labels.min() >= 0 and labels.max() <= 2


def test_full_graph_gradcheck_32cube_sampled():
    cfg = make_cfg(**{
        "data.extents": "32,32,32",
        "backbone.depth": "5",
        "smg.num_queries": "5",
    })
    model = build_model(cfg)
    sample = phantom_dataset(cfg, "train", 1)[0]

    def f():
        return model.compute_loss(sample.intensities, sample.labels, epoch=3)[0]

    report = ad.grad_check(
        f,
        [(n, p.tensor) for n, p in model.named_parameters()],
        h=1e-5,
        rel_tol=1e-3,
        max_coords=1,
        rng=np.random.default_rng(0),
    )
    assert report.passed, report.lines()
