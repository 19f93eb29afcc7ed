"""One inference step: per-frame BEV, dual attention fusion and staged Top-k queries.

Run with ``python3 demos/02_fusion_and_queries.py``.  Takes a few seconds.
"""

# %% An untrained model on a three-frame window
import numpy as np

from stbev import tensor as T
from stbev.bev import FeatureMap
from stbev.daf import DafParams, daf_fuse, dynamic_attention, static_attention
from stbev.harness.scenes import SceneConfig, current_first, generate_sequence
from stbev.pipeline import Model, ModelConfig, run_timestep

cfg = SceneConfig(seed=2)
window = current_first(generate_sequence(cfg), 3)
model = Model(ModelConfig(history=2), cfg.grid, seed=0)
print("parameter groups:", {g: len(v) for g, v in model.groups().items()})

# %% The two attention branches on concatenated frames
rng = np.random.default_rng(0)
frames = [FeatureMap(rng.normal(size=cfg.grid.shape), cfg.grid, k) for k in range(3)]
p = DafParams.init(cfg.grid.channels, 2, rng)
b_c = T.concat_channels([T.Tensor(f.data) for f in frames])
sa, da = static_attention(b_c, p).data, dynamic_attention(b_c, p).data
print(f"static map {sa.shape}, range [{sa.min():.2f}, {sa.max():.2f}]")
print(f"dynamic gate {da.shape}, range [{da.min():.3f}, {da.max():.3f}]")
print("fused shape:", daf_fuse(frames, p).data.shape)

# %% Detections: every stage contributes k queries from cells the earlier stages left open
dets = run_timestep(window, model)
st = model.cfg.stages
print(f"{len(dets)} detections = {st.num_stages} stages x {st.k_per_stage}")
for d in sorted(dets, key=lambda d: -d.confidence)[:3]:
    print(f"  class {d.cls} conf {d.confidence:.3f} at ({d.box[0]:.2f}, {d.box[1]:.2f})")

# %% Without history the temporal operator is skipped entirely
single = run_timestep(window, model, temporal=False)
print("single-frame detections:", len(single))
