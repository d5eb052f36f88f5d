use std::io::{self, IsTerminal};

use seal::cli::{run_command, Console};

fn main() {
    let stdin = io::stdin();
    let tty = stdin.is_terminal();
    let mut input = stdin.lock();
    let mut stdout = io::stdout();
    let mut stderr = io::stderr();
    let mut console = Console {
        stdin: &mut input,
        stdout: &mut stdout,
        stderr: &mut stderr,
        tty,
    };
    let code = run_command(std::env::args_os(), &mut console);
    std::process::exit(code);
}
