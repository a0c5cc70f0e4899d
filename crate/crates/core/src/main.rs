//! Binary entry point; all behavior lives in [`embnmt::cli`].

fn main() {
    std::process::exit(embnmt::cli::run());
}
