from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from fewshot.config import load_run_config
from fewshot.errors import ImcoError
from fewshot.services import Method, emit_outputs, run_pipeline


class Command(BaseCommand):
    help = "Run one method through pre-training and every incremental session, then write its results."

    def add_arguments(self, parser):
        parser.add_argument("--config", help="Flat JSON file overriding the settings defaults.")
        parser.add_argument("--method", choices=[method.value for method in Method])
        parser.add_argument("--seed", type=int)
        parser.add_argument("--out", dest="out_dir", help="Output root; results go to OUT/<method>-seed<N>/.")

    def handle(self, *args, **options):
        try:
            config = load_run_config(
                options["config"],
                {"method": options["method"], "seed": options["seed"], "out_dir": options["out_dir"]},
            )
            result = run_pipeline(config)
            target = Path(config.out_dir) / config.run_name
            paths = emit_outputs(result, target)
        except (ImcoError, OSError) as exc:
            raise CommandError(str(exc)) from exc

        final = result.metrics[-1]
        self.stdout.write(
            f"{config.run_name}: acc_all={final.acc_all:.4f} acc_base={final.acc_base:.4f} "
            f"acc_novel={final.acc_novel:.4f} forgetting={final.forgetting:.4f}"
        )
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(paths)} files to {target}."))
