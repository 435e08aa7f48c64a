use std::io::Write;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    let code = tokmerge::cli::run(&args, &mut out, &mut err);
    let _ = out.flush();
    std::process::exit(code);
}
