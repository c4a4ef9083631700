"""Profile a model, pick (P, N) for each network preset, then simulate an epoch.

    python demos/quickstart.py
"""

from pipelearn.cost import EpochShape, network, profile_model
from pipelearn.experiments import best_sfl
from pipelearn.optimizer import select_params
from pipelearn.sim import simulate

shape = EpochShape(dataset_size=10000, batch_size=100)
devices = 4

for model in ("vgg5-like", "resnet18-like"):
    profile = profile_model(model, seed=0)
    print(f"\n{model}: {profile.Q} layers")
    for preset in ("4g", "4g+", "wifi"):
        net = network(preset)
        sel = select_params(profile, net, shape, devices=devices)
        p = sel.params[0]
        pl = simulate("pipelearn", p, profile, net, shape, devices)
        _, sfl = best_sfl(profile, net, shape, devices)
        fl = simulate("fl", None, profile, net, shape, devices)
        print(f"  {preset:5s} P={p.P} N={p.N:<3d} estimate {sel.estimates[0]:8.1f} s"
              f"  | epoch  pipelearn {pl.epoch_makespan:8.1f} s  sfl {sfl.epoch_makespan:8.1f} s"
              f"  fl {fl.epoch_makespan:8.1f} s")
