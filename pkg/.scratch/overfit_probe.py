"""Calibrate the end-to-end overfit: 4 tone pairs at 5 dB SNR."""
import sys, time, tempfile
from pathlib import Path
import numpy as np
import torch

from melrefine import dsp, evaluate, simulate
from melrefine.flow import FlowConfig
from melrefine.net import EstimatorConfig
from melrefine.refine import Refiner, refine_mel
from melrefine.train import TrainConfig, run_training, save_checkpoint

t_start = time.time()
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3
dur = float(sys.argv[3]) if len(sys.argv) > 3 else 0.5

tmp = Path(tempfile.mkdtemp())
clean_dir = tmp / "clean_src"
clean_dir.mkdir()
rng = np.random.default_rng(42)
for i, (f0, f1) in enumerate([(330, 660), (440, 1320), (550, 1100), (700, 2100)]):
    t = np.arange(int(dur * 24000)) / 24000
    x = 0.35 * np.sin(2 * np.pi * f0 * t) + 0.15 * np.sin(2 * np.pi * f1 * t)
    dsp.save_wav(dsp.AudioBuffer(x, 24000), clean_dir / f"tone{i}.wav")

manifest = simulate.build_dataset(clean_dir, tmp / "data", [simulate.DegradationSpec(snr_db=5.0, seed=1)], seed=7)
fb = dsp.build_mel_filterbank()
pairs = [simulate.record_mels(r, fb) for r in manifest]
print("frames per pair:", [p[0].n_frames for p in pairs], flush=True)

model_cfg = EstimatorConfig()
flow_cfg = FlowConfig()
train_cfg = TrainConfig(batch_size=4, total_steps=steps, learning_rate=lr, seed=3, dtype="float32", checkpoint_interval=100000)
ck_path = tmp / "ck.bin"
result = run_training(pairs, model_cfg, flow_cfg, train_cfg, checkpoint_path=ck_path,
                      dsp_config=None, log=lambda s, l: print(f"step {s}: {l:.5f}", flush=True) if s % 200 == 0 else None)
init_loss = np.mean(result.losses[:10])
final_loss = np.mean(result.losses[-10:])
print(f"loss first10 {init_loss:.4f} last10 {final_loss:.4f} ratio {final_loss/init_loss:.4f}")
print(f"train time {time.time()-t_start:.0f}s")

refiner = Refiner.from_checkpoint(ck_path)
for i, record in enumerate(manifest):
    clean = dsp.load_wav(record.clean_path)
    distorted = dsp.load_wav(record.distorted_path)
    clean_mel, distorted_mel = simulate.record_mels(record, fb)
    refined_mel = refiner.mel(distorted_mel, seed=100 + i)
    mse = float(np.mean((refined_mel.values - clean_mel.values) ** 2))
    refined = refiner.wav(distorted, seed=100 + i)
    n = min(len(clean), len(refined))
    crop = lambda b: dsp.AudioBuffer(b.samples[:n], 24000)
    si_d = evaluate.si_snr(crop(distorted), crop(clean))
    si_r = evaluate.si_snr(crop(refined), crop(clean))
    print(f"pair {i}: mel MSE {mse:.4f}  SI-SNR dist {si_d:.2f} -> refined {si_r:.2f}")
print(f"total {time.time()-t_start:.0f}s")
