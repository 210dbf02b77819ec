fn main() {
    std::process::exit(cwl_mpi::cli::main(std::env::args_os()));
}
