fn main() {
    println!("{}", lirf_core::probe(0.0));
}
