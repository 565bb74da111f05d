"""CLI sub-commands; each module exposes NAME, HELP, add_arguments() and run()"""
from facecloak.commands import (
    ablate, attack_eval, evaluate, gen_world, protect, train_fr, train_ppt, transfer,
)

COMMANDS = [gen_world, train_fr, train_ppt, protect, evaluate, attack_eval, ablate, transfer]
