fn main() {
    std::process::exit(elastic_dllm_cli::run(std::env::args_os()));
}
