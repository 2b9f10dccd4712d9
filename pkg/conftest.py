import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "imco_lab.settings")
django.setup()
