fn main() {
    println!("lethe");
}
