"""Interrupt a run after round 3, resume it from disk, and compare with a
run that was never interrupted."""

import tempfile

from roost import Path, RunConfig, coinflip_target, resume, run

path = Path(*coinflip_target(1000, 400))


class Stop(Exception):
    pass


def stop_after_3(rnd, state):
    if rnd == 3:
        raise Stop


with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
    full = run(RunConfig(n_rounds=6, record={"traces"}, checkpoint=True, output_dir=a), path)
    try:
        run(RunConfig(n_rounds=6, record={"traces"}, checkpoint=True, output_dir=b), path,
            on_round_end=stop_after_3)
    except Stop:
        print("interrupted after round 3")
    resumed = resume(b, path)
    print("same trace:", resumed.trace == full.trace)
    print("same schedules:", resumed.schedules == full.schedules)
