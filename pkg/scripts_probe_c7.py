import sys, time, warnings
warnings.filterwarnings("ignore")
import numpy as np
import iqt
from iqt.pipeline import make_subjects, build_training_set
from iqt.normalizer import apply_normalization

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-3
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 12

t_start = time.time()
dist = iqt.DEFAULT_DISTRIBUTIONS["t1w"]
cfg = iqt.PhantomConfig(dims=(64, 64, 64), modulation=0.04)
subjects = make_subjects(6, 4, dist, cfg, seed=42, fixed_contrast=True)
patchsets, table = build_training_set(subjects, 4, step=(16, 16, 2))
print(f"[{time.time()-t_start:5.1f}s] patches {[len(p) for p in patchsets]}", flush=True)

spec = iqt.ModelSpec(r=4, levels=3, base_filters=4)
import os
decay = float(os.environ.get("DECAY", "1e-6"))
config = iqt.TrainConfig(learning_rate=lr, decay=decay, batch_size=8, epochs=epochs, val_fraction=0.2, seed=1)
weights, history = iqt.train(spec, patchsets, config, verbose=True)

# held-out subject
test = make_subjects(1, 4, dist, cfg, seed=777, fixed_contrast=True)[0]
enhanced = iqt.enhance_volume(weights, spec, test.lf, table)
cubic = iqt.cubic_upsample_z(test.lf, 4)
hf64 = test.hf.with_data(test.hf.data.astype(np.float64))
enh = enhanced.with_data(enhanced.data.astype(np.float64))
cub = cubic.with_data(cubic.data.astype(np.float64))
p_net, p_cub = iqt.psnr(enh, hf64), iqt.psnr(cub, hf64)
s_net, s_cub = iqt.ssim(enh, hf64), iqt.ssim(cub, hf64)
print(f"[{time.time()-t_start:5.1f}s] PSNR net {p_net:.2f} vs cubic {p_cub:.2f} (delta {p_net-p_cub:+.2f} dB)", flush=True)
print(f"SSIM net {s_net:.4f} vs cubic {s_cub:.4f}", flush=True)
print(f"val best/epoch1: {min(h.val_mse for h in history)/history[0].val_mse:.3f}", flush=True)
print(f"TOTAL {time.time()-t_start:.0f}s", flush=True)
