fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(cwl_mpi::mock_mpi::mock_launch(&argv));
}
