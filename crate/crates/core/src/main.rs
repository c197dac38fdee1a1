fn main() {
    rfm_lab::cli::main()
}
