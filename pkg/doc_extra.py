import dataclasses

from pyvptr.block import flops_estimate
from pyvptr.config import RunConfig

VARIANTS = ("far", "par", "nar")


def flops_markdown(profile="desk", mode="rip", batch=1):
    config = RunConfig.profile(profile)
    reports = {
        variant: flops_estimate(dataclasses.replace(config.model, variant=variant), batch, mode)
        for variant in VARIANTS
    }
    components = [name for name, _ in reports["far"].rows()]
    lines = ["| component | " + " | ".join(v.upper() for v in VARIANTS) + " |", "|---" * 4 + "|"]
    for name in components:
        cells = [f"{dict(reports[v].rows())[name]:.3g}" for v in VARIANTS]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def define_env(env):
    @env.macro
    def flops_table(profile="desk", mode="rip"):
        return flops_markdown(profile, mode)

    @env.macro
    def config_dump(profile="desk"):
        return "```ini\n" + RunConfig.profile(profile).dumps() + "```\n"
