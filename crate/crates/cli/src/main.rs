use std::process::ExitCode;

fn main() -> ExitCode {
    eprintln!("gradcycle: no commands wired yet");
    ExitCode::from(2)
}
