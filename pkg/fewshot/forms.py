"""Form that validates a flat run configuration and turns it into a RunConfig."""
from pathlib import Path

from django import forms
from django.core.exceptions import ValidationError

from .dmf import DmfConfig
from .errors import ConfigError
from .implanting import MixSpace, MixSpec, PrototypeMetric
from .services import DatasetSpec, ImplantSpec, Method, RunConfig


def validate_positive(value):
    if not value > 0:
        raise ValidationError("Must be greater than zero.")


def validate_fraction(value):
    if not 0.0 <= value < 1.0:
        raise ValidationError("Must lie in [0, 1).")


def _choices(enum_type):
    return [(member.value, member.value) for member in enum_type]


class RunConfigForm(forms.Form):
    # dataset
    dataset = forms.ChoiceField(choices=[("blobs", "blobs"), ("csv", "csv")])
    csv_path = forms.CharField(required=False)
    num_classes = forms.IntegerField(min_value=2)
    dim = forms.IntegerField(min_value=2)
    samples_per_class = forms.IntegerField(min_value=2)
    center_scale = forms.FloatField(min_value=0.0)
    spread = forms.FloatField(validators=[validate_positive])
    test_fraction = forms.FloatField(validators=[validate_fraction])
    # schedule
    base_count = forms.IntegerField(min_value=2)
    session_size = forms.IntegerField(min_value=1)
    shots = forms.IntegerField(min_value=1)
    # network
    hidden_dims = forms.CharField(help_text="Comma-separated backbone widths, e.g. 64,32,32.")
    # implanting
    pretrain_episodes = forms.IntegerField(min_value=0)
    way = forms.IntegerField(min_value=2)
    query = forms.IntegerField(min_value=1)
    beta_a = forms.FloatField(validators=[validate_positive])
    beta_b = forms.FloatField(validators=[validate_positive])
    mix_space = forms.ChoiceField(choices=_choices(MixSpace))
    prototype_metric = forms.ChoiceField(choices=_choices(PrototypeMetric))
    pretrain_lr = forms.FloatField(validators=[validate_positive])
    momentum = forms.FloatField(min_value=0.0, max_value=0.999)
    head_epochs = forms.IntegerField(min_value=0)
    closed_set_epochs = forms.IntegerField(min_value=0)
    batch_size = forms.IntegerField(min_value=1)
    # compressing
    dmf_lr = forms.FloatField(validators=[validate_positive])
    max_step = forms.FloatField(validators=[validate_positive])
    damping = forms.FloatField(min_value=0.0, max_value=1.0)
    error_coef = forms.FloatField(min_value=0.0)
    alpha_min = forms.FloatField(min_value=0.0, max_value=1.0)
    alpha_max = forms.FloatField(min_value=0.0, max_value=1.0)
    tunable_top_layers = forms.IntegerField(min_value=0)
    iterations = forms.IntegerField(min_value=0)
    adv_lr = forms.FloatField(min_value=0.0)
    adv_epochs = forms.IntegerField(min_value=1)
    finetune_lr = forms.FloatField(validators=[validate_positive])
    # run
    method = forms.ChoiceField(choices=_choices(Method))
    seed = forms.IntegerField(min_value=0)
    out_dir = forms.CharField()

    def clean_hidden_dims(self):
        raw = self.cleaned_data["hidden_dims"]
        try:
            widths = tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError as exc:
            raise ValidationError("Enter comma-separated integers.") from exc
        if not widths or any(width < 1 for width in widths):
            raise ValidationError("Give at least one positive layer width.")
        return widths

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data

        if cleaned_data["alpha_min"] > cleaned_data["alpha_max"]:
            raise ValidationError({"alpha_min": "alpha_min must not exceed alpha_max."})
        if cleaned_data["way"] > cleaned_data["base_count"]:
            raise ValidationError({"way": "Episodes cannot draw more classes than there are base classes."})

        if cleaned_data["dataset"] == "csv":
            self._validate_csv_path(cleaned_data["csv_path"])
        else:
            self._validate_partition(cleaned_data)
            self._validate_sample_budget(cleaned_data)
        return cleaned_data

    def _validate_csv_path(self, csv_path: str) -> None:
        if not csv_path:
            raise ValidationError({"csv_path": "A csv dataset needs csv_path."})
        if not Path(csv_path).is_file():
            raise ValidationError({"csv_path": f"Dataset file {csv_path} does not exist."})

    def _validate_partition(self, data) -> None:
        remainder = data["num_classes"] - data["base_count"]
        if remainder < data["session_size"] or remainder % data["session_size"]:
            raise ValidationError(
                {
                    "num_classes": (
                        f"{data['num_classes']} classes cannot split into {data['base_count']} base classes "
                        f"plus at least one session of {data['session_size']}."
                    )
                }
            )

    def _validate_sample_budget(self, data) -> None:
        count = data["samples_per_class"]
        held_out = min(round(count * data["test_fraction"]), count - 1)
        train = count - held_out
        if data["shots"] + data["query"] > train:
            raise ValidationError(
                {
                    "query": (
                        f"shots + query = {data['shots'] + data['query']} exceeds the {train} "
                        "training samples per class."
                    )
                }
            )

    def to_run_config(self) -> RunConfig:
        if not self.is_valid():
            errors = {name: list(messages) for name, messages in self.errors.items()}
            details = "; ".join(f"{name}: {' '.join(messages)}" for name, messages in errors.items())
            raise ConfigError(f"Invalid run configuration ({details}).", errors=errors)
        data = self.cleaned_data
        return RunConfig(
            dataset=DatasetSpec(
                source=data["dataset"],
                csv_path=data["csv_path"],
                num_classes=data["num_classes"],
                dim=data["dim"],
                samples_per_class=data["samples_per_class"],
                center_scale=data["center_scale"],
                spread=data["spread"],
                test_fraction=data["test_fraction"],
            ),
            base_count=data["base_count"],
            session_size=data["session_size"],
            shots=data["shots"],
            hidden_dims=data["hidden_dims"],
            implant=ImplantSpec(
                episodes=data["pretrain_episodes"],
                way=data["way"],
                query=data["query"],
                mix=MixSpec(data["beta_a"], data["beta_b"]),
                mix_space=MixSpace(data["mix_space"]),
                metric=PrototypeMetric(data["prototype_metric"]),
                lr=data["pretrain_lr"],
                momentum=data["momentum"],
                head_epochs=data["head_epochs"],
                closed_set_epochs=data["closed_set_epochs"],
                batch_size=data["batch_size"],
            ),
            dmf=DmfConfig(
                lr=data["dmf_lr"],
                max_step=data["max_step"],
                damping=data["damping"],
                error_coef=data["error_coef"],
                alpha_min=data["alpha_min"],
                alpha_max=data["alpha_max"],
                tunable_top_layers=data["tunable_top_layers"],
                iterations=data["iterations"],
            ),
            adv_lr=data["adv_lr"],
            adv_epochs=data["adv_epochs"],
            finetune_lr=data["finetune_lr"],
            method=Method(data["method"]),
            seed=data["seed"],
            out_dir=data["out_dir"],
        )
