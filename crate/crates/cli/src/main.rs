use clap::Parser;

fn main() -> anyhow::Result<()> {
    audiocap_cli::run(audiocap_cli::Cli::parse())
}
