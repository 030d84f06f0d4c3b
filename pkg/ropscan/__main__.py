from ropscan.main import app

app(prog_name="ropscan")
