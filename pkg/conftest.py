import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "magshield_project.settings")
django.setup()
