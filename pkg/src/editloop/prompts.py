"""Prompt templates for every MLLM-backed role.

These are artifact-owned and versioned here; bump PROMPT_VERSION when
wording changes so traces stay attributable.
"""

PROMPT_VERSION = "1"

PROFILE = """\
You are profiling an image-editing request before execution.

Instruction: {instruction}

Summarize the request as a single JSON object with exactly these keys:
  "target": short description of the object or region to edit
  "constraint": one of "ambiguity", "structural_dependency", "background_coupling", "none"
  "scope": "localized" or "scene_level"
  "scene_context": one-sentence summary of the overall scene
  "small_target": true if the target occupies a small fraction of the image
  "multi_target": true if the instruction addresses several instances

Reply with the JSON object only."""

ROUTER = """\
Pick the execution route for this image-editing request.

Instruction: {instruction}
Profile: {profile}
{context_line}
Decide in this order: if the edit needs a target-centered local workspace
(small or weakly grounded target), choose C. If it needs spatial
decoupling (relocation, structural dependency, strong background
coupling), choose B. Otherwise stay in the original image space: choose A
when the instruction is already a clear physical action, or A2 when it
should be rewritten first.

Available routes: {choices}

Reply with the route token only."""

PLANNER = """\
You are driving a multi-step image edit. Choose the next action.

Route: {route}
Instruction: {instruction}
Steps so far: {history}
Allowed next actions: {allowed}

Reply with one action name from the allowed list."""

OFFSET = """\
An object must be relocated inside the image.

Instruction: {instruction}
Current object box [x, y, w, h] on a 0-1000 canvas: {box}

Reply with the displacement as a JSON array [dx, dy] in the same
0-1000 units (positive dx moves right, positive dy moves down)."""

FIXPROMPT = """\
Inspect the attached image and this editing instruction:

{instruction}

If the instruction is already a direct, unambiguous physical action,
reply with exactly DIRECT. Otherwise rewrite it into one precise,
unambiguous physical action and reply with the rewritten instruction
only."""

IFINISH = """\
You are verifying an image edit. Compare the original image and the
current image against the instruction:

{instruction}

Ignore minor generative artifacts; strictly evaluate whether the core
physical action requested by the instruction has been achieved.

Reply with a JSON object: {{"status": "<short status>",
"is_finished": true or false, "reasoning": "<one sentence>"}}."""

REFINE = """\
The current image was produced by pasting edited content into the
original. Inspect both images for integration errors: truncated
structures, missing shadows, harsh boundaries.

Reply with one short corrective instruction (under 200 characters) for a
follow-up editing pass. Reply with the instruction text only."""

JUDGE = """\
Two candidate edits were produced for this instruction:

{instruction}

Candidate images are attached in order. Reply with 1 or 2: the number of
the candidate that fulfils the instruction best."""

SCORE = """\
Rate how well the attached edited image fulfils this instruction:

{instruction}

Reply with a single number."""

BACKGROUND_COMPLETION = "remove the {target} and fill the background naturally"
