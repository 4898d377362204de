def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance scorecard so it shows without -s."""
    try:
        from test_acceptance import SCORECARD
    except ImportError:
        return
    if SCORECARD:
        terminalreporter.section("acceptance scorecard")
        for line in SCORECARD:
            terminalreporter.write_line(line)
