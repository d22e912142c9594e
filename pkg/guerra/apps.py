from django.apps import AppConfig


class GuerraConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'guerra'
    verbose_name = 'Guerra-Talagrand bounds'
