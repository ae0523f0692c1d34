use clap::Parser;

fn main() -> anyhow::Result<()> {
    vocalemb::cli::run(vocalemb::cli::Cli::parse())
}
