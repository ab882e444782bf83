import os
import sys

# Get scripts folder and add it to the search path for modules
filesDir = os.path.dirname(os.path.abspath(__file__))
scriptsDir = os.path.join(filesDir, "scripts")
sys.path.insert(0, scriptsDir)


def run_demo(scriptFile):
    # Compile and execute one module's demo, e.g. `run_script.py geometry_dp.py`
    file = os.path.join(scriptsDir, scriptFile)
    try:
        with open(file) as f:
            code = compile(f.read(), file, 'exec')
    except FileNotFoundError:
        print(f"Error: The script file '{scriptFile}' was not found.", file=sys.stderr)
        return 3
    exec(code, {'__name__': '__main__', '__file__': file})
    return 0


if __name__ == '__main__':
    if len(sys.argv) > 1 and sys.argv[1].endswith('.py'):
        sys.exit(run_demo(sys.argv[1]))

    import cli
    sys.exit(cli.main(sys.argv[1:]))
