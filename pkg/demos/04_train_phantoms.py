"""
Training on phantoms
====================

A short run on small synthetic phantoms: train, segment a held-out
volume, score it and write a TP/FP/FN overlay. Settings are scaled down
so the script finishes in about a minute; the acceptance run uses 64³
phantoms and 48³ patches.
"""

import tempfile
from pathlib import Path

from usvessel.augment import AugmentConfig
from usvessel.metrics import FALSE_NEGATIVE, FALSE_POSITIVE, TRUE_POSITIVE, dice_to_iou, evaluate, overlay
from usvessel.phantom import PhantomConfig, generate
from usvessel.train import Dataset, TrainConfig, train
from usvessel.unet import UNetConfig, infer_volume
from usvessel.volume import preprocess, write_volume


def item(seed):
    image, label = generate(PhantomConfig(dims=(40, 40, 40), radius_range=(2, 5), seed=seed))
    return (f"p{seed}", preprocess(image, factor=1.0, margin=0), label)


data = Dataset(train=[item(s) for s in range(4)], val=[item(50)])
aug = AugmentConfig(patch_size=(32, 32, 32), patches_per_volume=4, elastic_grid_spacing=16, seed=0)
cfg = TrainConfig(max_epochs=12, seed=0, val_overlap=8)


def report(epoch, params, history):
    print("epoch %d  loss %.3f  val dice %.3f" % (epoch, history[-1]["train_loss"], history[-1]["val_dice"]))


with tempfile.TemporaryDirectory() as tmp:
    params, history = train(data, cfg, UNetConfig(), aug, out_dir=tmp, callback=report)
    print(sorted(p.name for p in Path(tmp).iterdir()))

name, image, truth = item(99)
pred = infer_volume(params, image, tile=(32, 32, 32), overlap=8)
r = evaluate(pred, truth, volume_id=name)
print("held-out %s: dice %.3f  iou %.3f  (identity gives %.3f)" % (name, r.dice, r.iou, dice_to_iou(r.dice)))

codes = overlay(pred, truth).data
for code, what in ((TRUE_POSITIVE, "TP"), (FALSE_POSITIVE, "FP"), (FALSE_NEGATIVE, "FN")):
    print(what, int((codes == code).sum()))

with tempfile.TemporaryDirectory() as tmp:
    write_volume(overlay(pred, truth), Path(tmp) / "overlay.mhd")
    print("overlay written as", (Path(tmp) / "overlay.mhd").read_text().splitlines()[-2])
