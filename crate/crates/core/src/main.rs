fn main() { std::process::exit(trendeq::cli::main()) }
