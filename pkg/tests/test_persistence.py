import numpy as np

from cxrdebias.classifier import (
    ClassifierConfig,
    HeadSpec,
    PhaseSpec,
    TrainSchedule,
    build_classifier,
    load_cls_model,
    predict_nodule_prob,
    save_cls_model,
    train_fold,
)
from cxrdebias.lungseg import (
    SegTrainConfig,
    load_seg_model,
    predict_mask,
    save_seg_model,
    train_segmenter,
)
from cxrdebias.phantom import default_spec, generate_phantom
from cxrdebias.ribsup import (
    SuppressorTrainConfig,
    load_supp_model,
    save_supp_model,
    suppress_bones,
    train_suppressor,
)


def phantom_pairs(n, size=64):
    out = []
    for seed in range(n):
        img, mask, _ = generate_phantom(default_spec(size=size, seed=seed))
        out.append((img, mask))
    return out


def test_seg_model_round_trip(tmp_path):
    pairs = phantom_pairs(4)
    cfg = SegTrainConfig(input_size=64, widths=(4, 8), epochs=1, batch_size=2,
                         val_fraction=0.25, seed=0)
    model, _ = train_segmenter(pairs, cfg)
    save_seg_model(model, tmp_path / "seg")
    loaded = load_seg_model(tmp_path / "seg")
    assert loaded.input_size == 64 and loaded.widths == (4, 8)
    img = pairs[0][0]
    assert (predict_mask(loaded, img).bits == predict_mask(model, img).bits).all()


def test_supp_model_round_trip(tmp_path):
    pairs = [(img, img) for img, _ in phantom_pairs(4)]
    cfg = SuppressorTrainConfig(input_size=64, epochs=1, batch_size=2,
                                val_fraction=0.25, seed=0, loss="mse")
    model, _ = train_suppressor(pairs, cfg)
    save_supp_model(model, tmp_path / "supp")
    loaded = load_supp_model(tmp_path / "supp")
    img = pairs[0][0]
    assert (suppress_bones(loaded, img).pixels == suppress_bones(model, img).pixels).all()


def test_cls_model_round_trip(tmp_path):
    items = []
    for i in range(8):
        img, _, _ = generate_phantom(default_spec(size=32, seed=i))
        items.append((img, i % 2))
    cfg = ClassifierConfig(pretrained="never", head=HeadSpec(hidden=16))
    model = build_classifier(cfg, seed=0)
    sched = TrainSchedule(phase1=PhaseSpec(1e-3, 1), phase2=PhaseSpec(1e-5, 1),
                          batch_size=4, input_size=32, seed=0)
    model, _ = train_fold(model, items[:6], items[6:] + items[:2], sched)
    save_cls_model(model, tmp_path / "cls")
    loaded = load_cls_model(tmp_path / "cls")
    assert loaded.input_size == 32
    assert loaded.cfg.head.hidden == 16
    img = items[0][0]
    assert abs(predict_nodule_prob(loaded, img) - predict_nodule_prob(model, img)) < 1e-6
