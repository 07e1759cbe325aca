"""Network model, case I/O and the AC power-flow oracle."""
from .case import Bus, Generator, GridCase, Line, Load, Renewable, case_from_dict
from .io import dump_case, load_case, parse_case, save_case
from .powerflow import (Injections, OutputSpec, PfSolution, evaluate_outputs, extract_outputs,
                        line_flows, solve_ac_pf)
