"""
Pretrain, probe, and resume
===========================

A small encoder is pretrained on synthetic pairs and then frozen, and a
linear probe on its global features measures what it learned. Turning
the text term off gives the image-only reference.
"""

import os
from pathlib import Path

from textinfomax.data import SynthSpec, generate_synthetic, split_records, synthetic_text_encoder
from textinfomax.encoders import ImageEncoderConfig
from textinfomax.evalprobe import ProbeConfig, format_table
from textinfomax.experiments import probe_accuracy, variant_config
from textinfomax.trainer import TrainConfig, load_checkpoint, parameter_digest, pretrain, save_checkpoint

OUT = Path(os.environ.get("DEMO_OUT", "demo_out")) / "pretrain"
OUT.mkdir(parents=True, exist_ok=True)

records = generate_synthetic(SynthSpec(n_classes=8, n_samples=600, image_size=32, overlap=0.9, seed=0))
train, test = split_records(records, 400)
text = synthetic_text_encoder(dim=64, seed=0)
base = TrainConfig(encoder=ImageEncoderConfig(ndf=8, nrkhs=32), batch_size=32, epochs=3,
                   text_dim=64, log_every=1000)
probe_cfg = ProbeConfig(epochs=30)

# %%
# Same seed, same data order, same views. Only the loss differs.
rows = {}
for name, overrides in [("with text", {}), ("image only", {"lambda_inter": 0.0})]:
    ckpt, history = pretrain(variant_config(base, overrides, seed=0), train, text)
    report = probe_accuracy(ckpt, train, test, probe_cfg)
    rows[name] = {"top1": report.top1, "final_loss": history[-1]["total"]}
print(format_table(rows))

# %%
# Stop after one epoch, write the checkpoint, reload it and finish. The
# result is bit-identical to the uninterrupted run.
cfg = variant_config(base, {}, seed=0)
full, _ = pretrain(cfg, train, text)
part, _ = pretrain(cfg, train, text, stop_after_epoch=1)
save_checkpoint(part, OUT / "epoch1.ckpt")
resumed, _ = pretrain(cfg, train, text, resume=load_checkpoint(OUT / "epoch1.ckpt"))
print("uninterrupted", parameter_digest(full)[:16])
print("resumed      ", parameter_digest(resumed)[:16])
