"""
Distill, train, then push an image up or down
=============================================

A small synthetic corpus keeps this under a minute or two on a laptop.
Writes heatmap.png next to this script.
"""
from pathlib import Path

import numpy as np
from scoredist.data import SynthSpec, synth_corpus, save_gray
from scoredist.model import Network, NetConfig, BackboneConfig, HeadConfig, predict_distribution
from scoredist.training import (OptimizerConfig, train_teacher, generate_teacher_targets, train_distill,
                                network_from_distilled, train_aesthetic, evaluate)
from scoredist.adversarial import PerturbConfig, adversarial_run, heatmap
from scoredist import distcore

c = synth_corpus(SynthSpec(n_images=400, seed=3), val_count=50, test_count=50)
s = c.split

# stage one: mimic a frozen classifier's soft labels
teacher = train_teacher([c.images[i] for i in s.train], c.classes(s.train), 4)
targets = generate_teacher_targets(teacher, c)
small = NetConfig(BackboneConfig(channels=(8, 16, 32, 32)), HeadConfig(hidden=64))
d = train_distill(Network(small, seed=0), c, s.train, targets, OptimizerConfig.desk(iters=300, step_iters=200))
print("distill ce", round(d.ce_before, 3), "->", round(d.ce_after, 3))

# stage two: regress the score distributions with huber
net = network_from_distilled(d.net, small.head, seed=1)
train_aesthetic(net, c, s.train, OptimizerConfig.desk(iters=2000, step_iters=1400), init="distilled")
rep, _ = evaluate(net, c, s.test)
print("test", rep.to_json())

# move one test image's predicted mean down
img = c.images[s.test[0]]
res = adversarial_run(net, img, PerturbConfig(direction="worsen", steps=50))
before = distcore.mean_score(predict_distribution(net, img))
after = distcore.mean_score(predict_distribution(net, res.image))
print("mean", round(before, 3), "->", round(after, 3))
h = heatmap(img, res.image)
save_gray(h.values, Path(__file__).with_name("heatmap.png"))
print(h.summary)
