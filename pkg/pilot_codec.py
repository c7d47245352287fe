"""Pilot run: calibrate codec training hyperparameters for the quality gates."""
import time

import numpy as np

from pcvstream.codec import (
    PruneConfig, lightweight_train, make_codec_model, mean_chamfer,
    toy_block_dataset, train,
)

data = toy_block_dataset(500, 128, seed=7)
train_set, test_set = data[:400], data[400:]

t_all = time.time()
for latent in (16, 64, 256):
    t0 = time.time()
    model = make_codec_model(latent, 128, seed=latent)
    curve = train(model, train_set, epochs=80, lr=0.002, lr_decay=0.98, seed=1)
    cd_f32 = mean_chamfer(model, test_set)
    t1 = time.time()
    cfg = PruneConfig(zeta=0.5, rounds=5, finetune_epochs=3)
    q8 = lightweight_train(model, train_set, cfg, m=8, lr=0.001, seed=2)
    cd_q8 = mean_chamfer(q8, test_set)
    t2 = time.time()
    print(f"latent {latent}: loss {curve[0]:.2f}->{curve[-1]:.2f} "
          f"cd_f32 {cd_f32:.5f} cd_q8 {cd_q8:.5f} ratio {cd_q8/cd_f32:.3f} "
          f"zeros {min(q8.zero_fractions()):.3f} "
          f"pre {t1-t0:.0f}s light {t2-t1:.0f}s", flush=True)
print(f"total {time.time()-t_all:.0f}s")
