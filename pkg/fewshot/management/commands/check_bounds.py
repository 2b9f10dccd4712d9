import numpy as np
from django.core.management.base import BaseCommand, CommandError

from fewshot.dmf import (
    RATIO_TOLERANCE,
    displacement_bound,
    pinned_drift,
    recursion_gap,
    simulate_random_streams,
    simulate_worst_case,
    zero_alpha_gap,
)

WORST_CASE_S_ALPHA = 0.25
MAX_STEP = 0.01


class Command(BaseCommand):
    help = "Check the DMF displacement bound, its degenerate cases and the unrolled recursion numerically."

    def add_arguments(self, parser):
        parser.add_argument("--iterations", type=int, default=10000, help="DMF iterations for the worst case.")
        parser.add_argument("--streams", type=int, default=1000, help="Random gradient streams.")
        parser.add_argument("--stream-iterations", type=int, default=500)
        parser.add_argument("--seed", type=int, default=0)

    def handle(self, *args, **options):
        rng = np.random.default_rng(options["seed"])
        failures = []

        bound = float(displacement_bound(WORST_CASE_S_ALPHA, 1.0, MAX_STEP))
        drift = simulate_worst_case(WORST_CASE_S_ALPHA, MAX_STEP, options["iterations"])
        self.stdout.write(f"worst case: drift={drift:.12f} bound={bound:.12f}")
        if drift > bound * (1.0 + RATIO_TOLERANCE) or bound - drift > 1e-6:
            failures.append(f"worst-case drift {drift!r} does not converge to the bound {bound!r}")

        ratio = simulate_random_streams(options["streams"], 4, options["stream_iterations"], rng, MAX_STEP)
        self.stdout.write(f"random streams: max drift/bound ratio={ratio:.9f}")
        if ratio > 1.0 + RATIO_TOLERANCE:
            failures.append(f"a random stream exceeded its bound (ratio {ratio!r})")

        gap = zero_alpha_gap(200, 6, 5, rng, max_step=MAX_STEP)
        self.stdout.write(f"alpha = 0 versus clipped SGD: max gap={gap:.3e}")
        if gap > 1e-12:
            failures.append(f"alpha = 0 departs from clipped SGD by {gap!r}")

        pinned = pinned_drift(200, 6, 5, rng, MAX_STEP)
        self.stdout.write(f"s * alpha = 1: max drift={pinned:.3e}")
        if pinned != 0.0:
            failures.append(f"pinned parameters drifted by {pinned!r}")

        worst_gap = max(recursion_gap(steps, 6, 5, rng, MAX_STEP) for steps in (1, 2, 10, 50))
        self.stdout.write(f"unrolled recursion: max gap={worst_gap:.3e}")
        if worst_gap > 1e-10:
            failures.append(f"iterated and unrolled trajectories differ by {worst_gap!r}")

        if failures:
            raise CommandError("; ".join(failures))
        self.stdout.write(self.style.SUCCESS("All displacement checks passed."))
