from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """Ledger entry for one management-command invocation"""

    COMMAND_CHOICES = [
        ('phase_scan', 'Phase scan'),
        ('exact_gap', 'Exact spectral gaps'),
        ('rate_curve', 'Rate curve'),
        ('barrier', 'Barrier certificate'),
        ('mcmc', 'Overlap sampler'),
    ]

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('success', 'Success'),
        ('config_error', 'Configuration Error'),
        ('not_converged', 'Numerical Non-convergence'),
        ('invariant_violation', 'Invariant Violation'),
    ]

    command = models.CharField(max_length=20, choices=COMMAND_CHOICES)
    config = models.JSONField(default=dict)
    seed = models.IntegerField(default=0)
    threads = models.PositiveIntegerField(default=1)
    output_dir = models.CharField(max_length=500, blank=True)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    exit_code = models.IntegerField(null=True, blank=True)
    message = models.TextField(blank=True)
    code_version = models.CharField(max_length=20, blank=True)

    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.command} seed={self.seed} ({self.status})"

    def finish(self, status, exit_code, message=''):
        self.status = status
        self.exit_code = exit_code
        self.message = message
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'exit_code', 'message', 'finished_at'])

    @property
    def duration(self):
        if self.finished_at is None:
            return None
        return (self.finished_at - self.started_at).total_seconds()
