"""
One network, many image shapes
==============================

The pyramid pools a 3x3 grid sized to whatever feature map arrives,
so the head always sees the same vector length.
"""
import numpy as np
from scoredist.model import Network, NetConfig, min_input_size
from scoredist.spp import SPPConfig, adaptive_spp
from scoredist.errors import ResolutionError

net = Network(NetConfig(), seed=0)
rng = np.random.default_rng(1)

for H, W in [(96, 96), (128, 64), (96, 160), (33, 33)]:
    x = rng.random((3, H, W)).astype(np.float32)
    fmap = net.features(x[None])
    v = adaptive_spp(fmap, net.cfg.spp).data
    print((H, W), "->", fmap.shape[-2:], "spp", v.shape, "norm", round(float(np.linalg.norm(v)), 6), "out", net.predict_raw(x).shape)

print("smallest input", min_input_size(net.cfg))
try:
    net.predict_raw(rng.random((3, 32, 64)))
except ResolutionError as e:
    print("too small:", e)

# a ResNet-sized map would give 2048 * 9 features
print(SPPConfig(n=3, channels=2048).output_length)
