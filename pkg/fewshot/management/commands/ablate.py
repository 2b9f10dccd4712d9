from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from fewshot.config import load_run_config
from fewshot.errors import ImcoError
from fewshot.services import (
    COMPONENT_METHODS,
    CORE_METHODS,
    format_ablation_table,
    run_ablation,
    write_ablation_csv,
)


class Command(BaseCommand):
    help = "Run every method over several seeds and report median final metrics."

    def add_arguments(self, parser):
        parser.add_argument("--config", help="Flat JSON file overriding the settings defaults.")
        parser.add_argument("--seeds", type=int, default=5)
        parser.add_argument("--workers", type=int, default=1)
        parser.add_argument(
            "--variants",
            action="store_true",
            help="Also run the component variants (implant_frozen, vanilla_fusion, constant_alpha).",
        )
        parser.add_argument("--out", dest="out_dir")

    def handle(self, *args, **options):
        methods = list(CORE_METHODS)
        if options["variants"]:
            methods += [method for method in COMPONENT_METHODS if method not in methods]
        try:
            config = load_run_config(options["config"], {"out_dir": options["out_dir"]})
            rows = run_ablation(config, options["seeds"], methods, workers=options["workers"])
            path = write_ablation_csv(rows, Path(config.out_dir) / "ablation.csv")
        except (ImcoError, OSError) as exc:
            raise CommandError(str(exc)) from exc

        self.stdout.write(format_ablation_table(rows))
        self.stdout.write(self.style.SUCCESS(f"Wrote {path}."))
