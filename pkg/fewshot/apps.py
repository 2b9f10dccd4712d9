from django.apps import AppConfig


class FewshotConfig(AppConfig):
    name = "fewshot"
    verbose_name = "Incremental few-shot learning"
