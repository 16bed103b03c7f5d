import torch

torch.set_default_dtype(torch.float64)
torch.set_num_threads(1)

# one "criterion N: PASS|FAIL ..." line per acceptance check, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
