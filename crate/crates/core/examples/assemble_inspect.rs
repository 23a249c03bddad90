//! Assemble an applet source, then inspect the resulting bundle.

use remote_playground::cli::inspect_text;
use remote_playground::demo::{assemble_file, asset_dir};
use remote_playground::mcf::code::disassemble;
use remote_playground::mcf::Bundle;

fn main() {
    let path = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| asset_dir().join("applets/click.mcfa"));
    let bytes = assemble_file(&path).expect("assemble");
    println!("{} bytes from {}", bytes.len(), path.display());
    print!("{}", inspect_text(&bytes).expect("inspect"));

    let bundle = Bundle::parse(&bytes).unwrap();
    for e in &bundle.entries {
        for m in &e.class.methods {
            let n = disassemble(&m.code).map(|v| v.len()).unwrap_or(0);
            let name = e.class.method_name(m).unwrap_or("?");
            println!("{}.{name}: {n} instructions", e.name);
        }
    }
}
