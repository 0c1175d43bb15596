from django.core.exceptions import ImproperlyConfigured
from django.core.management.base import BaseCommand, CommandError


class ProbationCommand(BaseCommand):
    """
    Base for the package's commands. Configuration and domain errors raised
    while handling become CommandError so the process exits non-zero.
    """

    def handle(self, *args, **options):
        try:
            return self.run(*args, **options)
        except (ImproperlyConfigured, ValueError, RuntimeError, OSError) as e:
            raise CommandError(str(e)) from e

    def run(self, *args, **options):
        raise NotImplementedError

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))

    def error(self, message):
        self.stdout.write(self.style.ERROR(message))
