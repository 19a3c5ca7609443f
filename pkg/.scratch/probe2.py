"""Aggressive-convergence probe + GL init variants, end to end."""
import sys, time, tempfile
from pathlib import Path
import numpy as np
import torch

from melrefine import dsp, evaluate, simulate
from melrefine.dsp import ComplexSpectrogram
from melrefine.flow import FlowConfig
from melrefine.net import EstimatorConfig
from melrefine.refine import Refiner
from melrefine.train import TrainConfig, run_training

t_start = time.time()
steps, lr, dur, batch = 2000, 2e-3, 0.25, 8

tmp = Path(tempfile.mkdtemp())
clean_dir = tmp / "clean_src"; clean_dir.mkdir()
for i, (f0, f1) in enumerate([(330, 660), (440, 1320), (550, 1100), (700, 2100)]):
    t = np.arange(int(dur * 24000)) / 24000
    x = 0.35*np.sin(2*np.pi*f0*t) + 0.15*np.sin(2*np.pi*f1*t)
    dsp.save_wav(dsp.AudioBuffer(x, 24000), clean_dir / f"tone{i}.wav")

manifest = simulate.build_dataset(clean_dir, tmp/"data", [simulate.DegradationSpec(snr_db=5.0, seed=1)], seed=7)
fb = dsp.build_mel_filterbank()
pairs = [simulate.record_mels(r, fb) for r in manifest]
print("frames:", pairs[0][0].n_frames, flush=True)

cfgs = (EstimatorConfig(), FlowConfig(),
        TrainConfig(batch_size=batch, total_steps=steps, learning_rate=lr, seed=3, dtype="float32", checkpoint_interval=10**6))
ck = tmp / "ck.bin"
res = run_training(pairs, *cfgs, checkpoint_path=ck,
                   log=lambda s,l: print(f"step {s}: {l:.5f}", flush=True) if s % 400 == 0 else None)
print(f"loss ratio {np.mean(res.losses[-10:])/np.mean(res.losses[:10]):.4f}  mel_norm {res.mel_norm}")
print(f"train time {time.time()-t_start:.0f}s", flush=True)

def gl_with_init(mel, fb, init_phase=None, iterations=32, momentum=0.99):
    mag = np.clip(np.exp(mel.values) @ np.linalg.pinv(fb.weights).T, 0.0, None)
    length = max((mel.n_frames - 1) * dsp.HOP, 1)
    angles = np.ones_like(mag, dtype=np.complex128) if init_phase is None else np.exp(1j*init_phase)
    prev = np.zeros_like(angles); alpha = momentum/(1+momentum)
    for _ in range(iterations):
        audio = dsp.istft(ComplexSpectrogram(mag*angles, 24000), length)
        rebuilt = dsp.stft(audio).values
        update = rebuilt - alpha*prev
        prev = rebuilt
        angles = update/np.maximum(np.abs(update), 1e-16)
    return dsp.istft(ComplexSpectrogram(mag*angles, 24000), length)

refiner = Refiner.from_checkpoint(ck)
for i, record in enumerate(manifest):
    clean = dsp.load_wav(record.clean_path)
    distorted = dsp.load_wav(record.distorted_path)
    clean_mel, distorted_mel = simulate.record_mels(record, fb)
    refined_mel = refiner.mel(distorted_mel, seed=100+i)
    mse = float(np.mean((refined_mel.values - clean_mel.values)**2))
    dist_phase = np.angle(dsp.stft(distorted).values)
    outs = {
        "zero32": gl_with_init(refined_mel, fb),
        "init32": gl_with_init(refined_mel, fb, dist_phase),
        "init8":  gl_with_init(refined_mel, fb, dist_phase, iterations=8),
        "init1":  gl_with_init(refined_mel, fb, dist_phase, iterations=1),
    }
    n = min(len(clean), *(len(o) for o in outs.values()))
    crop = lambda b: dsp.AudioBuffer(b.samples[:n], 24000)
    si_d = evaluate.si_snr(crop(distorted), crop(clean))
    msg = "  ".join(f"{k} {evaluate.si_snr(crop(v), crop(clean)):6.2f}" for k, v in outs.items())
    print(f"pair {i}: MSE {mse:.4f}  dist {si_d:5.2f}  {msg}", flush=True)
print(f"total {time.time()-t_start:.0f}s")
