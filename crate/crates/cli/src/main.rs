fn main() {
    println!("poisonlab");
}
