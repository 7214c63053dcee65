import time, warnings
warnings.filterwarnings("ignore")
import numpy as np
import iqt
from iqt.pipeline import make_subjects, build_training_set
from iqt.autodiff import Tensor, Graph
from iqt.network import run_model
from iqt.normalizer import apply_normalization

t0 = time.time()
dist = iqt.DEFAULT_DISTRIBUTIONS["t1w"]
cfg = iqt.PhantomConfig(dims=(64, 64, 64), modulation=0.04)
subjects = make_subjects(6, 4, dist, cfg, seed=42, fixed_contrast=True)
patchsets, table = build_training_set(subjects, 4, step=(16, 16, 2))
spec = iqt.ModelSpec(r=4, levels=3, base_filters=4)
config = iqt.TrainConfig(learning_rate=1e-2, decay=1e-6, batch_size=8, epochs=20, val_fraction=0.2, seed=1)
weights, history = iqt.train(spec, patchsets, config, verbose=True)

test = make_subjects(1, 4, dist, cfg, seed=777, fixed_contrast=True)[0]
enhanced = iqt.enhance_volume(weights, spec, test.lf, table)
cubic = iqt.cubic_upsample_z(test.lf, 4)
hf = test.hf.data
err_net = (enhanced.data - hf) ** 2
err_cub = (cubic.data - hf) ** 2

bg = hf == 0
interior = ~bg
print(f"\nvolume MSE net {err_net.mean():.5f} cubic {err_cub.mean():.5f}", flush=True)
print(f"background MSE net {err_net[bg].mean():.6f} cubic {err_cub[bg].mean():.6f} (bg frac {bg.mean():.2f})")
print(f"foreground MSE net {err_net[interior].mean():.5f} cubic {err_cub[interior].mean():.5f}")

gz = np.abs(np.gradient(hf, axis=2))
edge = gz > np.percentile(gz[interior], 90)
print(f"edge-region MSE net {err_net[edge].mean():.5f} cubic {err_cub[edge].mean():.5f} (edge frac {edge.mean():.3f})")
smooth = interior & ~edge
print(f"smooth-region MSE net {err_net[smooth].mean():.5f} cubic {err_cub[smooth].mean():.5f}")

prof = err_net.mean(axis=(1, 2))
print("x-profile of net err (every 2):", np.array2string(prof[::2], precision=5), flush=True)
zprof = err_net.mean(axis=(0, 1))
print("z-profile of net err (every 2):", np.array2string(zprof[::2], precision=5), flush=True)

ps_test = iqt.extract_pairs(apply_normalization(test.lf, table), test.hf, 4, step=(16,16,2), bg_threshold=1.0)
xs = np.stack(ps_test.lf_patches[:8])[:, None].astype(np.float32)
ys = np.stack(ps_test.hf_patches[:8])[:, None].astype(np.float32)
pred_inf = iqt.forward(weights, spec, xs)
g = Graph(); g.mutate_state = False
pred_trn = run_model(spec, weights, g, Tensor(xs), training=True).data
print(f"patch MSE inference-BN {np.mean((pred_inf-ys)**2):.5f} vs batch-BN {np.mean((pred_trn-ys)**2):.5f}")

p_net = iqt.psnr(enhanced.with_data(enhanced.data.astype(np.float64)), test.hf)
p_cub = iqt.psnr(cubic.with_data(cubic.data.astype(np.float64)), test.hf)
s_net = iqt.ssim(enhanced.with_data(enhanced.data.astype(np.float64)), test.hf)
s_cub = iqt.ssim(cubic.with_data(cubic.data.astype(np.float64)), test.hf)
print(f"PSNR net {p_net:.2f} cubic {p_cub:.2f}; SSIM net {s_net:.4f} cubic {s_cub:.4f}")
print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
