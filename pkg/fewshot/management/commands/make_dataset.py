from django.core.management.base import BaseCommand, CommandError

from fewshot.data_gen import make_blob_classes, write_dataset_csv
from fewshot.errors import ImcoError


class Command(BaseCommand):
    help = "Write a synthetic Gaussian-class dataset in the label,f0,...,f{D-1} CSV format."

    def add_arguments(self, parser):
        parser.add_argument("--out", required=True)
        parser.add_argument("--num-classes", type=int, default=14)
        parser.add_argument("--dim", type=int, default=16)
        parser.add_argument("--samples-per-class", type=int, default=200)
        parser.add_argument("--center-scale", type=float, default=5.0)
        parser.add_argument("--spread", type=float, default=1.0)
        parser.add_argument("--seed", type=int, default=0)

    def handle(self, *args, **options):
        try:
            classset = make_blob_classes(
                options["num_classes"],
                options["dim"],
                options["samples_per_class"],
                options["center_scale"],
                options["spread"],
                options["seed"],
            )
            path = write_dataset_csv(classset, options["out"])
        except (ImcoError, OSError) as exc:
            raise CommandError(str(exc)) from exc
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(classset)} classes to {path}."))
