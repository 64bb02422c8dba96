/** Keyboard contract: number keys 1..9 pick candidates, a/s/Enter act. */

export type KeyAction =
  | { kind: "select"; index: number }
  | { kind: "toggle-all-overlays" }
  | { kind: "skip" }
  | { kind: "submit" };

export function keyAction(key: string): KeyAction | null {
  if (key.length === 1 && key >= "1" && key <= "9") {
    return { kind: "select", index: Number(key) - 1 };
  }
  if (key === "a") return { kind: "toggle-all-overlays" };
  if (key === "s") return { kind: "skip" };
  if (key === "Enter") return { kind: "submit" };
  return null;
}
