//! The worked examples in docs/isa.md assemble to the halfwords they list.

use mcfi::asm::assemble;
use mcfi::isa::{decode, encode};

fn examples() -> Vec<(String, String, Vec<u16>)> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/isa.md");
    let text = std::fs::read_to_string(path).unwrap();
    let section = text.split("## Worked examples").nth(1).unwrap().split("\n## ").next().unwrap();
    section
        .lines()
        .filter(|l| l.starts_with("| ") && l.contains('`'))
        .map(|l| {
            let cells: Vec<&str> =
                l.split(" | ").map(|c| c.trim_matches(|c| c == '|' || c == ' ' || c == '`')).collect();
            let halfwords = cells[2].split(' ').map(|h| u16::from_str_radix(h, 16).unwrap()).collect();
            (cells[0].to_string(), cells[1].to_string(), halfwords)
        })
        .collect()
}

#[test]
fn worked_examples_assemble_as_documented() {
    let rows = examples();
    assert!(rows.len() >= 21, "{rows:?}");
    for (kind, source, halfwords) in rows {
        let image = assemble(&format!(".region flash 0x6000 0x4000 rx ns\n.org 0x8000\n{source}\n")).unwrap();
        let got: Vec<u16> = image.bytes.chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        assert_eq!(got, halfwords, "{source}");
        let (instr, width) = decode(&image.bytes, 0).unwrap();
        assert_eq!(width as usize, image.bytes.len(), "{source}");
        assert!(format!("{instr:?}").starts_with(&kind), "{source}: {instr:?}");
        assert_eq!(encode(&instr).unwrap(), image.bytes, "{source}");
    }
}
