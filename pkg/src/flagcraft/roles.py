"""Server-role dressing templates.

Seven roles at minimal fidelity: role-appropriate users, a hostname, service
configuration files, a seeded fictitious log, and a shell history. Rendering
is deterministic per (role, seed) and no template may ever contain the
substring ``flag{`` (planting happens exclusively through plant scripts).
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .errors import ConfigError

ROLE_NAMES = (
    "webserver",
    "database",
    "devbox",
    "cicd",
    "mailserver",
    "monitoring",
    "gateway",
)

_PASSWD_HEADER = (
    "root:x:0:0:root:/root:/bin/bash\n"
    "daemon:x:1:1:daemon:/usr/sbin:/usr/sbin/nologin\n"
    "user:x:1000:1000:user:/home/user:/bin/bash\n"
)


@dataclass(frozen=True)
class LogSpec:
    """Seeded generator spec for one fictitious log file."""

    line_template: str
    lines: int = 40


@dataclass(frozen=True)
class RoleTemplate:
    name: str
    users: tuple[str, ...]
    hostname_pattern: str
    config_files: tuple[tuple[str, str], ...]
    log_files: tuple[tuple[str, LogSpec], ...]
    histories: tuple[tuple[str, tuple[str, ...]], ...]


_NGINX_CONF = """\
user www-data;
worker_processes auto;
events { worker_connections 768; }
http {
    sendfile on;
    keepalive_timeout 65;
    server {
        listen 80 default_server;
        root /var/www/html;
        index index.html;
    }
}
"""

_WWW_CRONTAB = """\
# m h dom mon dow command
17 3 * * * /usr/local/bin/rotate-sessions.sh
*/5 * * * * curl -fsS http://127.0.0.1/healthz > /dev/null
"""

_PG_CONF = """\
listen_addresses = 'localhost'
max_connections = 100
shared_buffers = 128MB
log_destination = 'stderr'
"""

_GIT_CONFIG = """\
[user]
    name = Dev Box
    email = dev@example.internal
[core]
    editor = vim
"""

_CI_CONFIG = """\
pipeline:
  image: builder:latest
  stages: [lint, test, package]
  cache: /var/cache/ci
"""

_POSTFIX_MAIN = """\
myhostname = mail.example.internal
mydestination = $myhostname, localhost
inet_interfaces = loopback-only
smtpd_banner = $myhostname ESMTP
"""

_PROM_CONFIG = """\
global:
  scrape_interval: 15s
scrape_configs:
  - job_name: node
    static_configs:
      - targets: ['localhost:9100']
"""

_HAPROXY_CONF = """\
defaults
    mode http
    timeout connect 5s
    timeout client 30s
frontend edge
    bind *:443
    default_backend pool_a
backend pool_a
    server app1 10.0.1.11:8080 check
"""

ROLE_TEMPLATES: dict[str, RoleTemplate] = {
    "webserver": RoleTemplate(
        name="webserver",
        users=("www-data",),
        hostname_pattern="web-{n:02d}",
        config_files=(
            ("/etc/nginx/nginx.conf", _NGINX_CONF),
            ("/var/spool/cron/crontabs/www-data", _WWW_CRONTAB),
        ),
        log_files=(
            (
                "/var/log/nginx/access.log",
                LogSpec(
                    '10.0.{a}.{b} - - [{ts}] "GET /{path} HTTP/1.1" {code} {size}'
                ),
            ),
        ),
        histories=(
            (
                "/home/user/.bash_history",
                (
                    "systemctl status nginx",
                    "tail -n 50 /var/log/nginx/access.log",
                    "nginx -t",
                    "sudo systemctl reload nginx",
                ),
            ),
        ),
    ),
    "database": RoleTemplate(
        name="database",
        users=("postgres",),
        hostname_pattern="db-{n:02d}",
        config_files=(("/etc/postgresql/postgresql.conf", _PG_CONF),),
        log_files=(
            (
                "/var/log/postgresql/postgresql.log",
                LogSpec("{ts} UTC [1{a}{b}] LOG:  checkpoint complete: wrote {size} buffers"),
            ),
        ),
        histories=(
            (
                "/home/user/.bash_history",
                (
                    "psql -U postgres -c 'select version();'",
                    "pg_dump appdb > /var/tmp/appdb.sql",
                    "du -sh /var/lib/postgresql",
                ),
            ),
        ),
    ),
    "devbox": RoleTemplate(
        name="devbox",
        users=("dev",),
        hostname_pattern="devbox-{n:02d}",
        config_files=(("/home/user/.gitconfig", _GIT_CONFIG),),
        log_files=(
            (
                "/var/log/apt/history.log",
                LogSpec("Start-Date: {ts}\nCommandline: apt-get install lib{path}-dev\nEnd-Date: {ts}"),
            ),
        ),
        histories=(
            (
                "/home/user/.bash_history",
                (
                    "git status",
                    "make -j4",
                    "./run_tests.sh --fast",
                    "vim src/main.c",
                ),
            ),
        ),
    ),
    "cicd": RoleTemplate(
        name="cicd",
        users=("ci-runner",),
        hostname_pattern="ci-{n:02d}",
        config_files=(("/etc/ci/pipeline.yml", _CI_CONFIG),),
        log_files=(
            (
                "/var/log/ci/runner.log",
                LogSpec("{ts} runner[{a}{b}]: job {size} finished: exit {code}"),
            ),
        ),
        histories=(
            (
                "/home/user/.bash_history",
                (
                    "docker ps -a",
                    "tail -f /var/log/ci/runner.log",
                    "systemctl restart ci-runner",
                ),
            ),
        ),
    ),
    "mailserver": RoleTemplate(
        name="mailserver",
        users=("postfix",),
        hostname_pattern="mail-{n:02d}",
        config_files=(("/etc/postfix/main.cf", _POSTFIX_MAIN),),
        log_files=(
            (
                "/var/log/mail.log",
                LogSpec("{ts} mail postfix/smtpd[{a}{b}]: connect from localhost[127.0.0.1]"),
            ),
        ),
        histories=(
            (
                "/home/user/.bash_history",
                (
                    "postqueue -p",
                    "tail -n 100 /var/log/mail.log",
                    "postfix reload",
                ),
            ),
        ),
    ),
    "monitoring": RoleTemplate(
        name="monitoring",
        users=("prometheus",),
        hostname_pattern="mon-{n:02d}",
        config_files=(("/etc/prometheus/prometheus.yml", _PROM_CONFIG),),
        log_files=(
            (
                "/var/log/prometheus/prometheus.log",
                LogSpec('{ts} level=info msg="scrape ok" job=node duration_ms={size}'),
            ),
        ),
        histories=(
            (
                "/home/user/.bash_history",
                (
                    "curl -s localhost:9090/-/healthy",
                    "promtool check config /etc/prometheus/prometheus.yml",
                ),
            ),
        ),
    ),
    "gateway": RoleTemplate(
        name="gateway",
        users=("haproxy",),
        hostname_pattern="gw-{n:02d}",
        config_files=(("/etc/haproxy/haproxy.cfg", _HAPROXY_CONF),),
        log_files=(
            (
                "/var/log/haproxy.log",
                LogSpec("{ts} gw haproxy[{a}{b}]: 10.0.{a}.{b}:443 pool_a/app1 {code} {size}"),
            ),
        ),
        histories=(
            (
                "/home/user/.bash_history",
                (
                    "haproxy -c -f /etc/haproxy/haproxy.cfg",
                    "ss -tlnp | head",
                    "journalctl -u haproxy --since today | tail",
                ),
            ),
        ),
    ),
}


def _render_log(spec: LogSpec, rng: random.Random) -> str:
    lines = []
    for _ in range(spec.lines):
        lines.append(
            spec.line_template.format(
                a=rng.randint(1, 254),
                b=rng.randint(1, 254),
                ts=f"2024-0{rng.randint(1, 9)}-{rng.randint(10, 28)} "
                f"{rng.randint(0, 23):02d}:{rng.randint(0, 59):02d}:{rng.randint(0, 59):02d}",
                path=rng.choice(("index", "status", "assets", "api/v1", "login")),
                code=rng.choice((200, 200, 200, 301, 404)),
                size=rng.randint(120, 48210),
            )
        )
    return "\n".join(lines) + "\n"


def render_role(role: str, seed: int) -> dict[str, bytes]:
    """Deterministic mapping of logical path to file content for one role."""
    if role not in ROLE_TEMPLATES:
        raise ConfigError(f"unknown role {role!r}; expected one of {ROLE_NAMES}")
    template = ROLE_TEMPLATES[role]
    rng = random.Random(f"role:{role}:{seed}")
    files: dict[str, bytes] = {}
    hostname = template.hostname_pattern.format(n=rng.randint(1, 99))
    files["/etc/hostname"] = (hostname + "\n").encode()
    passwd = _PASSWD_HEADER + "".join(
        f"{user}:x:{1100 + i}:{1100 + i}:{user}:/var/lib/{user}:/usr/sbin/nologin\n"
        for i, user in enumerate(template.users)
    )
    files["/etc/passwd"] = passwd.encode()
    for path, content in template.config_files:
        files[path] = content.encode()
    for path, spec in template.log_files:
        files[path] = _render_log(spec, rng).encode()
    for path, lines in template.histories:
        files[path] = ("\n".join(lines) + "\n").encode()
    return files
