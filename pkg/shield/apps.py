from django.apps import AppConfig


class ShieldConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'shield'
    verbose_name = 'MagShield orientation toolkit'
